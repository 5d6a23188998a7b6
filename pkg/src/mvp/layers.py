"""Transformer sublayers built on :mod:`mvp.numeric`.

Weights are stored row-major with inputs on the left: an affine map is
``x @ w + b`` where ``w`` has shape ``(in, out)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mvp import numeric as nx
from mvp.numeric import ArrayLike


@dataclass(frozen=True)
class AttentionWeights:
    qkv_w: np.ndarray  # (d, 3d), columns ordered [query | key | value]
    qkv_b: np.ndarray  # (3d,)
    proj_w: np.ndarray  # (d, d)
    proj_b: np.ndarray  # (d,)


@dataclass(frozen=True)
class MLPWeights:
    fc1_w: np.ndarray  # (d, mlp_ratio * d)
    fc1_b: np.ndarray
    fc2_w: np.ndarray  # (mlp_ratio * d, d)
    fc2_b: np.ndarray


@dataclass(frozen=True)
class LayerWeights:
    norm1_g: np.ndarray
    norm1_b: np.ndarray
    attn: AttentionWeights
    norm2_g: np.ndarray
    norm2_b: np.ndarray
    mlp: MLPWeights


def attention_block(seq: ArrayLike, weights: AttentionWeights, heads: int) -> ArrayLike:
    """Multi-head self-attention over the second-to-last axis of ``seq`` (``... x T x d``)."""
    shape = nx.value_of(seq).shape
    d = shape[-1]
    if heads < 1 or d % heads:
        raise ValueError(f"embedding dim {d} is not divisible by {heads} heads")
    if weights.qkv_w.shape != (d, 3 * d):
        raise ValueError(f"qkv weight shape {weights.qkv_w.shape} does not fit d={d}")
    lead, t = shape[:-2], shape[-2]
    dh = d // heads
    nlead = len(lead)

    qkv = nx.add(nx.matmul(seq, weights.qkv_w), weights.qkv_b)
    # (..., T, 3, H, dh) -> (3, ..., H, T, dh)
    qkv = nx.reshape(qkv, lead + (t, 3, heads, dh))
    perm = (nlead + 1,) + tuple(range(nlead)) + (nlead + 2, nlead, nlead + 3)
    qkv = nx.transpose(qkv, perm)
    q, k, v = nx.take(qkv, 0), nx.take(qkv, 1), nx.take(qkv, 2)

    scale = nx.value_of(seq).dtype.type(1.0 / np.sqrt(dh))
    kt = nx.transpose(k, tuple(range(nlead + 1)) + (nlead + 2, nlead + 1))
    attn = nx.softmax(nx.mul(nx.matmul(q, kt), scale), axis=-1)
    ctx = nx.matmul(attn, v)  # (..., H, T, dh)
    ctx = nx.transpose(ctx, tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2))
    ctx = nx.reshape(ctx, lead + (t, d))
    return nx.add(nx.matmul(ctx, weights.proj_w), weights.proj_b)


def feedforward_block(seq: ArrayLike, weights: MLPWeights) -> ArrayLike:
    """Row-wise two-layer MLP with exact GELU in between."""
    d = nx.value_of(seq).shape[-1]
    if weights.fc1_w.shape[0] != d or weights.fc2_w.shape != weights.fc1_w.shape[::-1]:
        raise ValueError(
            f"mlp weight shapes {weights.fc1_w.shape}/{weights.fc2_w.shape} do not fit d={d}")
    hidden = nx.gelu(nx.add(nx.matmul(seq, weights.fc1_w), weights.fc1_b))
    return nx.add(nx.matmul(hidden, weights.fc2_w), weights.fc2_b)


def transformer_layer(seq: ArrayLike, weights: LayerWeights, heads: int, eps: float = 1e-6) -> ArrayLike:
    """Pre-norm encoder layer: residual attention then residual MLP."""
    h = nx.add(seq, attention_block(nx.layer_norm(seq, weights.norm1_g, weights.norm1_b, eps),
                                    weights.attn, heads))
    return nx.add(h, feedforward_block(nx.layer_norm(h, weights.norm2_g, weights.norm2_b, eps),
                                       weights.mlp))
