"""Frozen Vision Transformer backbone: patch embedding and the CLS-feature recursion."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

import numpy as np

from mvp import numeric as nx
from mvp.layers import AttentionWeights, LayerWeights, MLPWeights, transformer_layer
from mvp.numeric import ArrayLike


@dataclass(frozen=True)
class ViTConfig:
    image_height: int = 224
    image_width: int = 224
    patch_height: int = 16
    patch_width: int = 16
    embed_dim: int = 192
    num_layers: int = 12
    num_heads: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        if min(self.image_height, self.image_width, self.patch_height, self.patch_width,
               self.embed_dim, self.num_heads, self.mlp_ratio) < 1 or self.num_layers < 0:
            raise ValueError(f"non-positive dimension in {self}")
        if self.image_height % self.patch_height or self.image_width % self.patch_width:
            raise ValueError("image size must be divisible by patch size")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_height, self.image_width // self.patch_width

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_height * self.patch_width


VIT_TINY = ViTConfig(embed_dim=192, num_layers=12, num_heads=3)
VIT_SMALL = ViTConfig(embed_dim=384, num_layers=12, num_heads=6)
VIT_BASE = ViTConfig(embed_dim=768, num_layers=12, num_heads=12)
PRESETS = {"tiny": VIT_TINY, "small": VIT_SMALL, "base": VIT_BASE}


@dataclass(frozen=True)
class BackboneWeights:
    cfg: ViTConfig
    patch_w: np.ndarray  # (3*h*w, d); patch pixels flattened channel, row, column
    patch_b: np.ndarray  # (d,)
    pos_embed: np.ndarray  # (1+m, d); row 0 belongs to CLS
    cls_token: np.ndarray  # (d,)
    layers: tuple[LayerWeights, ...]
    norm_g: np.ndarray
    norm_b: np.ndarray

    @property
    def dtype(self):
        return self.patch_w.dtype

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All weight arrays in a fixed, documented order (used for hashing and files)."""
        out = [("patch_w", self.patch_w), ("patch_b", self.patch_b),
               ("pos_embed", self.pos_embed), ("cls_token", self.cls_token)]
        for i, layer in enumerate(self.layers):
            for name, arr in _layer_arrays(layer):
                out.append((f"layers.{i}.{name}", arr))
        out += [("norm_g", self.norm_g), ("norm_b", self.norm_b)]
        return out

    def astype(self, dtype) -> "BackboneWeights":
        return from_named_arrays(self.cfg, {k: v.astype(dtype) for k, v in self.named_arrays()})

    def digest(self) -> str:
        """SHA-256 over config and every weight byte; unchanged iff the backbone is untouched."""
        h = hashlib.sha256(repr(self.cfg).encode())
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _layer_arrays(layer: LayerWeights) -> list[tuple[str, np.ndarray]]:
    out = [("norm1_g", layer.norm1_g), ("norm1_b", layer.norm1_b)]
    out += [(f"attn.{f.name}", getattr(layer.attn, f.name)) for f in fields(AttentionWeights)]
    out += [("norm2_g", layer.norm2_g), ("norm2_b", layer.norm2_b)]
    out += [(f"mlp.{f.name}", getattr(layer.mlp, f.name)) for f in fields(MLPWeights)]
    return out


def from_named_arrays(cfg: ViTConfig, arrays: dict[str, np.ndarray]) -> BackboneWeights:
    """Rebuild weights from ``named_arrays`` output; arrays are frozen read-only."""
    def get(name):
        arr = np.array(arrays[name], copy=True)
        arr.setflags(write=False)
        return arr

    layers = []
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        layers.append(LayerWeights(
            norm1_g=get(p + "norm1_g"), norm1_b=get(p + "norm1_b"),
            attn=AttentionWeights(**{f.name: get(p + "attn." + f.name) for f in fields(AttentionWeights)}),
            norm2_g=get(p + "norm2_g"), norm2_b=get(p + "norm2_b"),
            mlp=MLPWeights(**{f.name: get(p + "mlp." + f.name) for f in fields(MLPWeights)}),
        ))
    weights = BackboneWeights(
        cfg=cfg, patch_w=get("patch_w"), patch_b=get("patch_b"), pos_embed=get("pos_embed"),
        cls_token=get("cls_token"), layers=tuple(layers), norm_g=get("norm_g"), norm_b=get("norm_b"))
    _check_shapes(weights)
    return weights


def weight_shapes(cfg: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every backbone array, in ``named_arrays`` order."""
    d, m, hid = cfg.embed_dim, cfg.num_patches, cfg.mlp_ratio * cfg.embed_dim
    out = [("patch_w", (cfg.patch_dim, d)), ("patch_b", (d,)), ("pos_embed", (1 + m, d)),
           ("cls_token", (d,))]
    per_layer = [("norm1_g", (d,)), ("norm1_b", (d,)),
                 ("attn.qkv_w", (d, 3 * d)), ("attn.qkv_b", (3 * d,)),
                 ("attn.proj_w", (d, d)), ("attn.proj_b", (d,)),
                 ("norm2_g", (d,)), ("norm2_b", (d,)),
                 ("mlp.fc1_w", (d, hid)), ("mlp.fc1_b", (hid,)),
                 ("mlp.fc2_w", (hid, d)), ("mlp.fc2_b", (d,))]
    for i in range(cfg.num_layers):
        out += [(f"layers.{i}.{k}", v) for k, v in per_layer]
    return out + [("norm_g", (d,)), ("norm_b", (d,))]


def _check_shapes(w: BackboneWeights) -> None:
    expected = dict(weight_shapes(w.cfg))
    for name, arr in w.named_arrays():
        if arr.shape != expected[name]:
            raise ValueError(f"weight {name} has shape {arr.shape}, expected {expected[name]}")


def init_backbone(cfg: ViTConfig, seed: int = 0, dtype=nx.DEFAULT_DTYPE) -> BackboneWeights:
    """Seeded random backbone: matrices, positions and CLS uniform in +-1/sqrt(d), biases 0, norms identity."""
    rng = np.random.default_rng(seed)
    d, hid = cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim
    bound = 1.0 / np.sqrt(d)

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    def zeros(n):
        return np.zeros(n, dtype=dtype)

    def ones(n):
        return np.ones(n, dtype=dtype)

    arrays = {"patch_w": u(cfg.patch_dim, d), "patch_b": zeros(d),
              "pos_embed": u(1 + cfg.num_patches, d), "cls_token": u(d)}
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        arrays.update({
            p + "norm1_g": ones(d), p + "norm1_b": zeros(d),
            p + "attn.qkv_w": u(d, 3 * d), p + "attn.qkv_b": zeros(3 * d),
            p + "attn.proj_w": u(d, d), p + "attn.proj_b": zeros(d),
            p + "norm2_g": ones(d), p + "norm2_b": zeros(d),
            p + "mlp.fc1_w": u(d, hid), p + "mlp.fc1_b": zeros(hid),
            p + "mlp.fc2_w": u(hid, d), p + "mlp.fc2_b": zeros(d),
        })
    arrays["norm_g"] = ones(d)
    arrays["norm_b"] = zeros(d)
    return from_named_arrays(cfg, arrays)


def with_zero_positions(weights: BackboneWeights) -> BackboneWeights:
    pos = np.zeros_like(weights.pos_embed)
    pos.setflags(write=False)
    return replace(weights, pos_embed=pos)


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """``(..., 3, H, W)`` -> ``(..., m, 3*h*w)``, patches row-major over the grid."""
    *lead, c, hh, ww = images.shape
    if c != 3 or hh != cfg.image_height or ww != cfg.image_width:
        raise ValueError(f"image shape {(c, hh, ww)} does not match config "
                         f"(3, {cfg.image_height}, {cfg.image_width})")
    gh, gw = cfg.grid
    ph, pw = cfg.patch_height, cfg.patch_width
    x = images.reshape(*lead, 3, gh, ph, gw, pw)
    n = len(lead)
    x = np.moveaxis(x, [n + 1, n + 3], [n, n + 1])  # (..., gh, gw, 3, ph, pw)
    return x.reshape(*lead, gh * gw, 3 * ph * pw)


def embed_patches(image: np.ndarray, weights: BackboneWeights) -> np.ndarray:
    """Linear patch projection plus positional encoding.

    Accepts one image ``(3, H, W)`` or a batch ``(B, 3, H, W)``; returns
    ``(m, d)`` or ``(B, m, d)``.
    """
    patches = patchify(np.asarray(image, dtype=weights.dtype), weights.cfg)
    return patches @ weights.patch_w + weights.patch_b + weights.pos_embed[1:]


def cls_start(weights: BackboneWeights) -> np.ndarray:
    return weights.cls_token + weights.pos_embed[0]


def vit_forward(embeddings: ArrayLike, weights: BackboneWeights) -> ArrayLike:
    """CLS feature of the final layer (after the closing layer norm) for ``(..., m, d)`` embeddings."""
    cfg = weights.cfg
    shape = nx.value_of(embeddings).shape
    if shape[-2:] != (cfg.num_patches, cfg.embed_dim):
        raise ValueError(f"embeddings shape {shape} does not end in "
                         f"({cfg.num_patches}, {cfg.embed_dim})")
    lead = shape[:-2]
    cls = np.broadcast_to(cls_start(weights), lead + (1, cfg.embed_dim))
    seq = nx.concat([cls, embeddings], axis=-2)
    for layer in weights.layers:
        seq = transformer_layer(seq, layer, cfg.num_heads)
    return nx.layer_norm(nx.take(seq, (Ellipsis, 0, slice(None))), weights.norm_g, weights.norm_b)


def count_backbone_params(cfg: ViTConfig) -> int:
    """Exact scalar count of every backbone weight (no classification head)."""
    return sum(int(np.prod(shape)) for _, shape in weight_shapes(cfg))
