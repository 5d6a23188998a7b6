"""Episodic meta-training of prompts, per-task meta fine-tuning, and evaluation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from mvp import numeric as nx
from mvp.data import DatasetManifest, to_float
from mvp.episodes import (EpisodeTask, SamplerSpec, accuracy, compute_prototypes, episode_loss,
                          sample_episode)
from mvp.prompts import DEFAULT_PROMPT_TOKENS, PromptBank, prompted_forward
from mvp.rpr import build_pseudo_query, check_alpha
from mvp.vit import BackboneWeights, ViTConfig, embed_patches

log = logging.getLogger(__name__)

LR_GRID = (1e-4, 1e-3, 1e-2, 0.1, 0.0)
ALPHA_GRID = (0.05, 0.1, 0.2, 0.25)

# stream tags for derive_seed
_META_TRAIN, _EVAL, _FINETUNE, _AUG_TRAIN, _AUG_SCORE = 1, 2, 3, 4, 5


class GradientExplosionError(RuntimeError):
    pass


class FrozenBackboneError(RuntimeError):
    pass


def derive_seed(master: int, *keys: int) -> int:
    """Independent 32-bit seed for a (master, keys...) stream; schedule-order independent."""
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class RunConfig:
    vit: ViTConfig = field(default_factory=lambda: ViTConfig(16, 16, 4, 4, 32, 2, 4))
    prompt_tokens: int = DEFAULT_PROMPT_TOKENS
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    episodes: int = 300
    meta_lr: float = 1e-3
    momentum: float = 0.9
    finetune_steps: int = 50
    lr_grid: tuple[float, ...] = LR_GRID
    alpha_grid: tuple[float, ...] = ALPHA_GRID
    eval_tasks: int = 20
    seed: int = 0
    backbone_seed: int = 0
    plain_nll: bool = False
    precision: str = "float32"
    sources: tuple[str, ...] = ()
    target: str = ""
    backbone_path: str = ""

    def __post_init__(self):
        if not self.lr_grid or not self.alpha_grid:
            raise ValueError("lr and alpha grids must be non-empty")
        if self.finetune_steps < 0 or self.episodes < 0:
            raise ValueError("step and episode counts must be >= 0")
        if any(lr < 0 for lr in self.lr_grid):
            raise ValueError("learning rates must be >= 0")
        for a in self.alpha_grid:
            check_alpha(a)
        if self.prompt_tokens < 1:
            raise ValueError("prompt_tokens must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")

    @property
    def dtype(self):
        return np.dtype(self.precision).type

    def canonical(self) -> str:
        """Deterministic ``key=value`` text of every field (nested ones flattened)."""
        flat = {}
        for key, value in asdict(self).items():
            if isinstance(value, dict):
                flat.update({f"{key}.{k}": v for k, v in value.items()})
            else:
                flat[key] = value
        return "\n".join(f"{k}={flat[k]!r}" for k in sorted(flat))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


# -- shared training step ---------------------------------------------------


def _features_and_loss(support_emb: np.ndarray, support_labels, support_ids,
                       query_emb: np.ndarray, query_labels, prompts, weights: BackboneWeights,
                       way: int, plain_nll: bool):
    n_s = len(support_labels)
    feats = prompted_forward(np.concatenate([support_emb, query_emb]), prompts, weights)
    protos = compute_prototypes(nx.take(feats, slice(0, n_s)), support_labels, support_ids, way)
    loss = episode_loss(nx.take(feats, slice(n_s, None)), query_labels, protos, plain_nll)
    return feats, protos, loss


def prompt_gradients(support_emb, support_labels, support_ids, query_emb, query_labels,
                     bank: PromptBank, weights: BackboneWeights, way: int | None = None,
                     plain_nll: bool = False) -> tuple[float, list[np.ndarray], float]:
    """Episode loss, its gradient w.r.t. every prompt array, and query accuracy."""
    way = int(np.max(support_labels)) + 1 if way is None else way
    tape = nx.GradientTape()
    watched = [tape.watch(a) for a in bank.prompts]
    feats, protos, loss = _features_and_loss(support_emb, support_labels, support_ids, query_emb,
                                             query_labels, watched, weights, way, plain_nll)
    grads = tape.gradient(loss, watched)
    n_s = len(support_labels)
    acc = accuracy(nx.value_of(feats)[n_s:], query_labels,
                   type(protos)(nx.value_of(protos.prototypes), protos.counts))
    return float(nx.value_of(loss)), grads, acc


def _embed_ids(dataset: DatasetManifest, ids, weights: BackboneWeights) -> np.ndarray:
    return embed_patches(to_float(dataset.images[ids], weights.dtype), weights)


# -- meta-training ------------------------------------------------------------


@dataclass
class TraceRow:
    episode: int
    source: int
    way: int
    shot: int
    loss: float
    accuracy: float


def meta_train(sources: Sequence[DatasetManifest], cfg: RunConfig, bank: PromptBank,
               weights: BackboneWeights, exclude_ids: Sequence[str] = ()
               ) -> tuple[PromptBank, list[TraceRow]]:
    """SGD with momentum on the prompts over ``cfg.episodes`` sampled episodes.

    Each update uses one episode. ``exclude_ids`` lists dataset ids of
    evaluation targets; a source matching any of them is rejected.
    """
    clash = {s.dataset_id for s in sources} & set(exclude_ids)
    if clash:
        raise ValueError(f"meta-training sources overlap evaluation targets: {sorted(clash)}")
    if cfg.episodes and not sources:
        raise ValueError("meta-training needs at least one source dataset")
    before = weights.digest()
    rng = np.random.default_rng(derive_seed(cfg.seed, _META_TRAIN))
    prompts = [a.copy() for a in bank.prompts]
    velocity = [np.zeros_like(a) for a in prompts]
    mu = np.dtype(bank.dtype).type(cfg.momentum)
    lr = np.dtype(bank.dtype).type(cfg.meta_lr)
    trace = []
    for ep in range(cfg.episodes):
        src = int(rng.integers(len(sources)))
        data = sources[src]
        task = sample_episode(data, cfg.sampler, rng, episode_id=ep)
        loss, grads, acc = prompt_gradients(
            _embed_ids(data, task.support_ids, weights), task.support_labels, task.support_ids,
            _embed_ids(data, task.query_ids, weights), task.query_labels,
            bank.with_prompts(prompts), weights, task.way, cfg.plain_nll)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            raise GradientExplosionError(f"non-finite loss/gradient at episode {ep}")
        for k, g in enumerate(grads):
            velocity[k] = mu * velocity[k] + g
            prompts[k] = prompts[k] - lr * velocity[k]
        trace.append(TraceRow(ep, src, task.way, task.shot, loss, acc))
        if ep % 50 == 0:
            log.info("episode %d way %d shot %d loss %.4f acc %.3f", ep, task.way, task.shot, loss, acc)
    if weights.digest() != before:
        raise FrozenBackboneError("backbone weights changed during meta-training")
    return bank.with_prompts(prompts), trace


# -- meta fine-tuning ---------------------------------------------------------


@dataclass
class FinetuneResult:
    bank: PromptBank
    lr: float
    alpha: float
    scores: dict[tuple[float, float], float]


def meta_finetune(support_images: np.ndarray, support_labels, bank: PromptBank,
                  weights: BackboneWeights, cfg: RunConfig, seed: int,
                  support_ids=None) -> FinetuneResult:
    """Adapt prompts to one task's support set, choosing (lr, alpha) from the grids.

    For every grid pair a copy of ``bank`` takes ``cfg.finetune_steps`` plain
    gradient steps on the pseudo-query task built with that alpha. The
    candidate is scored by accuracy on a second pseudo-query set with an
    independent seed. Highest score wins; ties go to the smaller lr, then
    the smaller alpha.
    """
    support_labels = np.asarray(support_labels)
    if len(support_labels) == 0:
        raise ValueError("meta fine-tuning needs a non-empty support set")
    pixels = to_float(support_images, weights.dtype)
    way = int(support_labels.max()) + 1
    ids = np.arange(len(support_labels)) if support_ids is None else np.asarray(support_ids)

    def embed(x):
        return embed_patches(x, weights)

    candidates = sorted((lr, a) for lr in cfg.lr_grid for a in cfg.alpha_grid)
    best = None
    scores = {}
    for lr, alpha in candidates:
        train_task = build_pseudo_query(pixels, support_labels, alpha,
                                        derive_seed(seed, _AUG_TRAIN), embed, ids, way)
        score_task = build_pseudo_query(pixels, support_labels, alpha,
                                        derive_seed(seed, _AUG_SCORE), embed, ids, way)
        adapted = _adapt(train_task, bank, weights, lr, cfg.finetune_steps, cfg.plain_nll)
        score = task_accuracy(score_task, adapted, weights)
        scores[(lr, alpha)] = score
        if best is None or score > best[0]:
            best = (score, lr, alpha, adapted)
    _, lr, alpha, adapted = best
    return FinetuneResult(adapted, lr, alpha, scores)


def _adapt(task: EpisodeTask, bank: PromptBank, weights: BackboneWeights, lr: float,
           steps: int, plain_nll: bool) -> PromptBank:
    if lr == 0 or steps == 0:
        return bank.copy()
    prompts = [a.copy() for a in bank.prompts]
    step = np.dtype(bank.dtype).type(lr)
    for _ in range(steps):
        _, grads, _ = prompt_gradients(task.support_embeddings, task.support_labels, task.support_ids,
                                       task.query_embeddings, task.query_labels,
                                       bank.with_prompts(prompts), weights, task.way, plain_nll)
        prompts = [p - step * g for p, g in zip(prompts, grads)]
    return bank.with_prompts(prompts)


def task_accuracy(task: EpisodeTask, bank: PromptBank, weights: BackboneWeights) -> float:
    """Prototype accuracy on a task that carries support/query embeddings."""
    feats = prompted_forward(np.concatenate([task.support_embeddings, task.query_embeddings]),
                             bank, weights)
    n_s = len(task.support_labels)
    protos = compute_prototypes(feats[:n_s], task.support_labels, task.support_ids, task.way)
    return accuracy(feats[n_s:], task.query_labels, protos)


# -- evaluation -------------------------------------------------------------------


@dataclass
class TaskResult:
    task: int
    way: int
    shot: int
    accuracy: float
    lr: float
    alpha: float


@dataclass
class EvalReport:
    mean: float
    half_width: float
    n: int
    seed: int
    config_digest: str
    tasks: list[TaskResult] = field(default_factory=list)

    @classmethod
    def from_accuracies(cls, accuracies: Sequence[float], seed: int = 0, config_digest: str = "",
                        tasks: list[TaskResult] | None = None) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        if acc.size == 0:
            raise ValueError("need at least one task accuracy")
        half = 0.0 if acc.size == 1 else 1.96 * acc.std(ddof=1) / np.sqrt(acc.size)
        return cls(float(acc.mean()), float(half), int(acc.size), seed, config_digest, tasks or [])


def episode_task_embeddings(dataset: DatasetManifest, task: EpisodeTask, weights: BackboneWeights):
    return _embed_ids(dataset, task.support_ids, weights), _embed_ids(dataset, task.query_ids, weights)


def evaluate(target: DatasetManifest, bank: PromptBank, weights: BackboneWeights, cfg: RunConfig,
             n_tasks: int | None = None, finetune: bool = True) -> EvalReport:
    """Mean query accuracy +- 1.96 * sample std / sqrt(n) over sampled target episodes.

    Each task starts from the same ``bank``; with ``finetune`` it is first
    adapted by :func:`meta_finetune`.
    """
    n_tasks = cfg.eval_tasks if n_tasks is None else n_tasks
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    results = []
    for t in range(n_tasks):
        rng = np.random.default_rng(derive_seed(cfg.seed, _EVAL, t))
        task = sample_episode(target, cfg.sampler, rng, episode_id=t)
        lr = alpha = float("nan")
        adapted = bank
        if finetune:
            ft = meta_finetune(target.images[task.support_ids], task.support_labels, bank, weights,
                               cfg, derive_seed(cfg.seed, _FINETUNE, t), task.support_ids)
            adapted, lr, alpha = ft.bank, ft.lr, ft.alpha
        s_emb, q_emb = episode_task_embeddings(target, task, weights)
        feats = prompted_forward(np.concatenate([s_emb, q_emb]), adapted, weights)
        n_s = len(task.support_ids)
        protos = compute_prototypes(feats[:n_s], task.support_labels, task.support_ids, task.way)
        acc = accuracy(feats[n_s:], task.query_labels, protos)
        results.append(TaskResult(t, task.way, task.shot, acc, lr, alpha))
    return EvalReport.from_accuracies([r.accuracy for r in results], cfg.seed, cfg.digest(), results)
