"""Variable-way variable-shot episodes and the prototypical classifier/loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from mvp import numeric as nx
from mvp.numeric import ArrayLike

MIN_WAY = 5


class InsufficientDataError(ValueError):
    pass


class ZeroNormError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    max_way: int = 5
    max_shot: int = 5
    queries_per_class: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.max_way < MIN_WAY:
            raise ValueError(f"max_way must be >= {MIN_WAY}, got {self.max_way}")
        if self.max_shot < 1 or self.queries_per_class < 1:
            raise ValueError("max_shot and queries_per_class must be >= 1")


@dataclass
class EpisodeTask:
    """One few-shot task. Labels are contiguous ``0..way-1``; ids index the source dataset.

    Pseudo-query tasks (``pseudo=True``) carry precomputed embedding sets in
    ``support_embeddings``/``query_embeddings`` and their query ids repeat the
    support ids they were derived from.
    """

    way: int
    support_ids: np.ndarray
    support_labels: np.ndarray
    query_ids: np.ndarray
    query_labels: np.ndarray
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    episode_id: int = 0
    pseudo: bool = False
    support_embeddings: np.ndarray | None = None
    query_embeddings: np.ndarray | None = None

    @property
    def shots(self) -> np.ndarray:
        return np.bincount(self.support_labels, minlength=self.way)

    @property
    def shot(self) -> int:
        """Shared shot count (the minimum if classes differ)."""
        return int(self.shots.min())

    def dump_line(self) -> str:
        """``episode_id,way,shot,class_ids,support_ids,query_ids``; lists are space separated."""
        def ids(a):
            return " ".join(str(int(v)) for v in a)
        return (f"{self.episode_id},{self.way},{self.shot},{ids(self.class_ids)},"
                f"{ids(self.support_ids)},{ids(self.query_ids)}")


DUMP_HEADER = "episode_id,way,shot,class_ids,support_ids,query_ids"


def _labels_of(dataset) -> np.ndarray:
    return np.asarray(getattr(dataset, "labels", dataset))


def sample_episode(dataset, spec: SamplerSpec, rng: np.random.Generator,
                   episode_id: int = 0) -> EpisodeTask:
    """Draw way ~ U{5..max_way}, one shared shot ~ U{1..max_shot}, then classes and samples.

    ``dataset`` is anything with an integer ``labels`` array (or the array itself).
    Query count per class is ``queries_per_class`` capped by what the class has left.
    """
    labels = _labels_of(dataset)
    classes = np.unique(labels)
    if classes.size < MIN_WAY:
        raise InsufficientDataError(f"dataset has {classes.size} classes, need >= {MIN_WAY}")
    way = int(rng.integers(MIN_WAY, spec.max_way + 1))
    shot = int(rng.integers(1, spec.max_shot + 1))
    if way > classes.size:
        raise InsufficientDataError(f"sampled way {way} exceeds the {classes.size} available classes")
    chosen = rng.choice(classes, size=way, replace=False)

    s_ids, s_lab, q_ids, q_lab = [], [], [], []
    for new_label, cls in enumerate(chosen):
        members = np.flatnonzero(labels == cls)
        if members.size < shot + 1:
            raise InsufficientDataError(
                f"class {int(cls)} has {members.size} samples, need {shot} support + 1 query")
        n_query = min(spec.queries_per_class, members.size - shot)
        picked = rng.permutation(members)[:shot + n_query]
        s_ids.append(picked[:shot])
        q_ids.append(picked[shot:])
        s_lab.append(np.full(shot, new_label))
        q_lab.append(np.full(n_query, new_label))
    return EpisodeTask(
        way=way,
        support_ids=np.concatenate(s_ids), support_labels=np.concatenate(s_lab),
        query_ids=np.concatenate(q_ids), query_labels=np.concatenate(q_lab),
        class_ids=np.asarray(chosen), episode_id=episode_id)


def write_episode_dump(tasks: Iterable[EpisodeTask], path) -> None:
    with open(path, "w") as fh:
        fh.write(DUMP_HEADER + "\n")
        for t in tasks:
            fh.write(t.dump_line() + "\n")


# -- prototypes and the classifier ------------------------------------------


@dataclass
class PrototypeSet:
    prototypes: ArrayLike  # (C, d)
    counts: np.ndarray  # (C,)

    @property
    def way(self) -> int:
        return int(self.counts.size)


def compute_prototypes(features: ArrayLike, labels, sample_ids=None,
                       num_classes: int | None = None) -> PrototypeSet:
    """Class means of support features.

    Rows are first put in a stable order by ``sample_ids`` (row index when
    omitted) so the reduction order, and hence every bit of the result, does
    not depend on the order the support set arrived in.
    """
    labels = np.asarray(labels)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(labels, minlength=c)
    if counts.size > c or (counts[:c] == 0).any():
        empty = np.flatnonzero(counts[:c] == 0)
        raise ValueError(f"classes without support features: {empty.tolist()}")
    keys = np.arange(labels.size) if sample_ids is None else np.asarray(sample_ids)
    order = np.argsort(keys, kind="stable")
    feats = nx.take(features, order)
    dtype = nx.value_of(features).dtype
    averaging = np.zeros((c, labels.size), dtype=dtype)
    averaging[labels[order], np.arange(labels.size)] = 1
    averaging /= counts[:, None].astype(dtype)
    return PrototypeSet(nx.matmul(averaging, feats), counts)


def _unit_rows(x: ArrayLike, what: str) -> ArrayLike:
    norms = np.sqrt((nx.value_of(x) ** 2).sum(axis=-1, keepdims=True))
    if (norms == 0).any():
        raise ZeroNormError(f"zero-norm {what} vector; cosine distance undefined")
    return nx.div(x, nx.sqrt(nx.sum_(nx.mul(x, x), axis=-1, keepdims=True)))


def cosine_distance(features: ArrayLike, prototypes: ArrayLike) -> ArrayLike:
    """``1 - cos`` between every feature row and every prototype, shape ``(n, C)``."""
    f = _unit_rows(features, "feature")
    m = _unit_rows(prototypes, "prototype")
    return nx.sub(nx.value_of(f).dtype.type(1.0), nx.matmul(f, nx.transpose(m, (1, 0))))


def classify_query(features: ArrayLike, protos: PrototypeSet) -> ArrayLike:
    """Softmax over negative cosine distance. Accepts one ``(d,)`` feature or a batch ``(n, d)``."""
    single = nx.value_of(features).ndim == 1
    f = nx.reshape(features, (1, nx.value_of(features).shape[0])) if single else features
    probs = nx.softmax(nx.neg(cosine_distance(f, protos.prototypes)), axis=-1)
    return nx.take(probs, 0) if single else probs


def per_query_loss(features: ArrayLike, labels, protos: PrototypeSet,
                   plain_nll: bool = False) -> ArrayLike:
    """Per-query ``(dist_true + logsumexp(-dist)) / |S_true|`` (or without the ``1/|S|`` factor)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= protos.way):
        raise ValueError(f"query labels must lie in [0, {protos.way})")
    dist = cosine_distance(features, protos.prototypes)
    true = nx.take(dist, (np.arange(labels.size), labels))
    nll = nx.add(true, nx.logsumexp(nx.neg(dist), axis=-1))
    if plain_nll:
        return nll
    dtype = nx.value_of(dist).dtype
    return nx.div(nll, protos.counts[labels].astype(dtype))


def episode_loss(features: ArrayLike, labels, protos: PrototypeSet, plain_nll: bool = False) -> ArrayLike:
    """Mean of :func:`per_query_loss` over the queries."""
    return nx.mean(per_query_loss(features, labels, protos, plain_nll))


def accuracy(features: np.ndarray, labels, protos: PrototypeSet) -> float:
    probs = nx.value_of(classify_query(nx.value_of(features), protos))
    return float((probs.argmax(axis=-1) == np.asarray(labels)).mean())
