"""Deep prompt tokens: per-layer trainable prompts injected into a frozen ViT."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from mvp import numeric as nx
from mvp.layers import transformer_layer
from mvp.numeric import ArrayLike
from mvp.vit import BackboneWeights, ViTConfig, cls_start

DEFAULT_PROMPT_TOKENS = 10


@dataclass(frozen=True)
class PromptBank:
    """One ``(p, d)`` prompt array per transformer layer. These are the only trained weights."""

    prompts: tuple[np.ndarray, ...]
    seed: int = 0

    def __post_init__(self):
        shapes = {a.shape for a in self.prompts}
        if len(shapes) > 1:
            raise ValueError(f"prompt arrays disagree in shape: {sorted(shapes)}")
        if self.prompts and (self.prompts[0].ndim != 2 or self.prompts[0].shape[0] < 1):
            raise ValueError("each prompt array must be (p, d) with p >= 1")

    @property
    def num_layers(self) -> int:
        return len(self.prompts)

    @property
    def num_tokens(self) -> int:
        return self.prompts[0].shape[0] if self.prompts else 0

    @property
    def dim(self) -> int:
        return self.prompts[0].shape[1] if self.prompts else 0

    @property
    def size(self) -> int:
        return sum(a.size for a in self.prompts)

    @property
    def dtype(self):
        return self.prompts[0].dtype if self.prompts else np.dtype(nx.DEFAULT_DTYPE)

    def with_prompts(self, prompts: Sequence[np.ndarray]) -> "PromptBank":
        return PromptBank(tuple(np.array(a, copy=True) for a in prompts), self.seed)

    def copy(self) -> "PromptBank":
        return self.with_prompts(self.prompts)

    def astype(self, dtype) -> "PromptBank":
        return PromptBank(tuple(a.astype(dtype) for a in self.prompts), self.seed)

    def equals(self, other: "PromptBank") -> bool:
        """Bit-exact comparison (dtype, shape, and bytes)."""
        return len(self.prompts) == len(other.prompts) and all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.prompts, other.prompts))


def init_prompts(cfg: ViTConfig, p: int = DEFAULT_PROMPT_TOKENS, seed: int = 0,
                 dtype=nx.DEFAULT_DTYPE) -> PromptBank:
    if p < 1:
        raise ValueError(f"need at least one prompt token, got {p}")
    d = cfg.embed_dim
    bound = np.sqrt(6.0 / d)
    rng = np.random.default_rng(seed)
    return PromptBank(
        tuple(rng.uniform(-bound, bound, size=(p, d)).astype(dtype) for _ in range(cfg.num_layers)),
        seed)


def trainable_param_count(cfg: ViTConfig, p: int) -> int:
    return cfg.num_layers * p * cfg.embed_dim


PromptsLike = Union[PromptBank, Sequence[ArrayLike]]


def prompted_forward(embeddings: ArrayLike, bank: PromptsLike, weights: BackboneWeights) -> ArrayLike:
    """CLS feature of the prompted ViT for ``(..., m, d)`` embeddings.

    Layer ``i`` sees ``[CLS, P_i, E]``. Whatever the layer writes at the
    prompt positions is dropped and the next layer gets its own fresh
    prompts. Prompts carry no positional encoding.
    """
    prompts = bank.prompts if isinstance(bank, PromptBank) else list(bank)
    cfg = weights.cfg
    if len(prompts) != cfg.num_layers:
        raise ValueError(f"prompt bank has {len(prompts)} layers, backbone has {cfg.num_layers}")
    shape = nx.value_of(embeddings).shape
    if shape[-2:] != (cfg.num_patches, cfg.embed_dim):
        raise ValueError(f"embeddings shape {shape} does not end in "
                         f"({cfg.num_patches}, {cfg.embed_dim})")
    lead = shape[:-2]
    d = cfg.embed_dim

    cls = np.broadcast_to(cls_start(weights), lead + (1, d))
    tokens = embeddings
    for layer, prompt in zip(weights.layers, prompts):
        p = nx.value_of(prompt).shape[0]
        seq = nx.concat([cls, nx.broadcast_to(prompt, lead + (p, d)), tokens], axis=-2)
        out = transformer_layer(seq, layer, cfg.num_heads)
        cls = nx.take(out, (Ellipsis, slice(0, 1), slice(None)))
        tokens = nx.take(out, (Ellipsis, slice(1 + p, None), slice(None)))
    cls = nx.take(cls, (Ellipsis, 0, slice(None)))
    return nx.layer_norm(cls, weights.norm_g, weights.norm_b)
