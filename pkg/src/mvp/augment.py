"""Pixel-space augmentation baseline and the RPR timing benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from mvp.rpr import rpr_recombine
from mvp.vit import VIT_TINY, ViTConfig, embed_patches, init_backbone

BENCH_SHOTS = (1, 2, 4, 6, 8, 10)
BENCH_WAY = 10
BENCH_ALPHA = 0.25


def mixup(images: np.ndarray, rng: np.random.Generator, alpha: float = 1.0) -> np.ndarray:
    lam = images.dtype.type(rng.beta(alpha, alpha))
    perm = rng.permutation(len(images))
    return lam * images + (1 - lam) * images[perm]


def cutmix(images: np.ndarray, rng: np.random.Generator, alpha: float = 1.0) -> np.ndarray:
    _, _, h, w = images.shape
    lam = rng.beta(alpha, alpha)
    ch, cw = int(h * np.sqrt(1 - lam)), int(w * np.sqrt(1 - lam))
    cy, cx = rng.integers(h), rng.integers(w)
    y0, y1 = max(cy - ch // 2, 0), min(cy + ch // 2, h)
    x0, x1 = max(cx - cw // 2, 0), min(cx + cw // 2, w)
    out = images.copy()
    out[:, :, y0:y1, x0:x1] = images[rng.permutation(len(images)), :, y0:y1, x0:x1]
    return out


def cutout(images: np.ndarray, rng: np.random.Generator, size_fraction: float = 0.25) -> np.ndarray:
    n, _, h, w = images.shape
    sh, sw = max(1, int(h * size_fraction)), max(1, int(w * size_fraction))
    out = images.copy()
    ys, xs = rng.integers(0, h - sh + 1, size=n), rng.integers(0, w - sw + 1, size=n)
    for i in range(n):
        out[i, :, ys[i]:ys[i] + sh, xs[i]:xs[i] + sw] = 0
    return out


def pixel_augment(images: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Each of mixup, cutmix, cutout fires with probability ``p``; mixup runs if none fired."""
    ops = [op for op in (mixup, cutmix, cutout) if rng.random() < p] or [mixup]
    out = images
    for op in ops:
        out = op(out, rng)
    return out


@dataclass
class BenchRow:
    way: int
    shot: int
    batch: int
    rpr_seconds: float
    pixel_seconds: float

    @property
    def ratio(self) -> float:
        return self.pixel_seconds / self.rpr_seconds


def aug_bench(cfg: ViTConfig = VIT_TINY, n_trials: int = 1000, seed: int = 0,
              shots=BENCH_SHOTS, way: int = BENCH_WAY, alpha: float = BENCH_ALPHA) -> list[BenchRow]:
    """Mean wall time of RPR (on patch embeddings) versus the pixel baseline (on images).

    Both methods see the same batch for each ``way``-way ``k``-shot task.
    The patch embedding is computed once outside the timed region. Runs are
    strictly serial.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    weights = init_backbone(cfg, seed)
    rng = np.random.default_rng(seed)
    rows = []
    for k in shots:
        batch = rng.random((way * k, 3, cfg.image_height, cfg.image_width), dtype=np.float32)
        emb = embed_patches(batch, weights)
        aug_rng = np.random.default_rng([seed, k])

        t0 = time.perf_counter()
        for trial in range(n_trials):
            rpr_recombine(emb, alpha, trial)
        rpr_t = (time.perf_counter() - t0) / n_trials

        t0 = time.perf_counter()
        for _ in range(n_trials):
            pixel_augment(batch, aug_rng)
        pix_t = (time.perf_counter() - t0) / n_trials
        rows.append(BenchRow(way, k, way * k, rpr_t, pix_t))
    return rows
