"""Random Patch Recombination on patch embeddings, and pseudo-query tasks built from it.

Randomness: image ``i`` of a call with ``seed`` draws from its own
``numpy`` PCG64 generator seeded with ``SeedSequence([seed, i])``. It first
draws the selected positions (``choice(m, r, replace=False)``), then one
source image per selected position (``integers(0, bs)``). Any
implementation that follows this draw order reproduces the output bit for
bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from mvp.episodes import EpisodeTask

ALPHA_GRID = (0.05, 0.1, 0.2, 0.25)


@dataclass
class EmbeddingBatch:
    arrays: np.ndarray  # (bs, m, d)
    labels: np.ndarray  # (bs,)

    def __post_init__(self):
        if self.arrays.ndim != 3 or self.arrays.shape[0] < 1:
            raise ValueError(f"expected a non-empty (bs, m, d) block, got {self.arrays.shape}")
        if len(self.labels) != self.arrays.shape[0]:
            raise ValueError("one label per embedding set required")


def image_rng(seed: int, image_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, image_index])))


def num_selected(m: int, alpha: float) -> int:
    """Positions replaced per image: ``floor(m * alpha)``."""
    check_alpha(alpha)
    return int(m * alpha)


def check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"recombination rate must lie in [0, 1], got {alpha}")


def rpr_recombine(batch, alpha: float, seed: int, return_trace: bool = False):
    """Overwrite ``floor(m*alpha)`` random patch rows of each image with the
    same-position row of a uniformly drawn batch member.

    Images are processed in order and in place, so an image modified
    earlier can donate its already-recombined rows to a later one. A draw
    may pick the image itself, which leaves that row unchanged.

    ``batch`` is an :class:`EmbeddingBatch` or a ``(bs, m, d)`` array; the
    result has the same type. With ``return_trace`` a list of
    ``(positions, sources)`` per image is returned as well.
    """
    arrays = batch.arrays if isinstance(batch, EmbeddingBatch) else np.asarray(batch)
    if arrays.ndim != 3 or arrays.shape[0] < 1:
        raise ValueError(f"expected a non-empty (bs, m, d) block, got {arrays.shape}")
    bs, m, _ = arrays.shape
    r = num_selected(m, alpha)
    out = arrays.copy()
    trace = []
    for i in range(bs):
        rng = image_rng(seed, i)
        positions = rng.choice(m, size=r, replace=False)
        sources = rng.integers(0, bs, size=r)
        # positions are distinct, so the gather reads no row this step writes
        out[i, positions] = out[sources, positions]
        trace.append((positions, sources))
    result = EmbeddingBatch(out, batch.labels) if isinstance(batch, EmbeddingBatch) else out
    return (result, trace) if return_trace else result


def build_pseudo_query(support_images: np.ndarray, support_labels, alpha: float, seed: int,
                       embed: Callable[[np.ndarray], np.ndarray], support_ids=None,
                       way: int | None = None) -> EpisodeTask:
    """Auxiliary task whose queries are recombined embeddings of the support images.

    Recombination acts on ``embed`` output (patch projection plus positions),
    never on pixels. Each pseudo-query keeps the label of the image it came from.
    """
    support_labels = np.asarray(support_labels)
    if len(support_images) == 0:
        raise ValueError("cannot build pseudo-queries from an empty support set")
    check_alpha(alpha)
    emb = embed(support_images)
    queries = rpr_recombine(emb, alpha, seed)
    ids = np.arange(len(support_labels)) if support_ids is None else np.asarray(support_ids)
    return EpisodeTask(
        way=int(support_labels.max()) + 1 if way is None else way,
        support_ids=ids, support_labels=support_labels,
        query_ids=ids.copy(), query_labels=support_labels.copy(),
        pseudo=True, support_embeddings=emb, query_embeddings=queries)
