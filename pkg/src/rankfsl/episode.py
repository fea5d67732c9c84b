"""N-way K-shot episodes: sampling, the episodic loss and its gradient, evaluation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from ._seeding import SeedLike, rng_for, seed_key
from .classifier import ClassifierConfig, compute_prototypes, softmax
from .data import DataError, LabeledFeatureSet
from .metrics import MetricKind, pair_count, sample_pairs, similarity_matrix

__all__ = [
    "EpisodeConfig",
    "EpisodeTask",
    "EvalReport",
    "EpisodeGrads",
    "sample_episode",
    "episode_loss",
    "episode_loss_backward",
    "episode_loss_and_grads",
    "task_accuracy",
    "evaluate_tasks",
    "confidence_interval",
]

Embed = Callable[[np.ndarray], np.ndarray]


def _identity(x: np.ndarray) -> np.ndarray:
    return x


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1 or self.q_per_class < 1:
            raise ValueError("k_shot and q_per_class must be >= 1")


@dataclass(frozen=True, eq=False)
class EpisodeTask:
    class_ids: tuple
    support_labels: tuple
    support: np.ndarray
    query_labels: tuple
    query: np.ndarray
    support_index: np.ndarray
    query_index: np.ndarray

    def equals(self, other: "EpisodeTask") -> bool:
        return (
            self.class_ids == other.class_ids
            and np.array_equal(self.support_index, other.support_index)
            and np.array_equal(self.query_index, other.query_index)
        )


@dataclass(frozen=True)
class EvalReport:
    task_count: int
    mean_accuracy: float
    ci95: float
    per_task_accuracy: tuple

    @classmethod
    def from_accuracies(cls, accuracies) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        mean, ci = confidence_interval(acc)
        return cls(len(acc), mean, ci, tuple(float(a) for a in acc))

    def to_dict(self) -> dict:
        return {
            "task_count": self.task_count,
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "per_task_accuracy": list(self.per_task_accuracy),
        }


def confidence_interval(values) -> tuple[float, float]:
    """Mean and 95% half-width 1.96 * s / sqrt(T), ``s`` the sample std (ddof=1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no values")
    mean = float(np.mean(values))
    if values.size < 2:
        return mean, 0.0
    return mean, float(1.96 * np.std(values, ddof=1) / np.sqrt(values.size))


def sample_episode(dataset: LabeledFeatureSet, config: EpisodeConfig, seed: SeedLike) -> EpisodeTask:
    need = config.k_shot + config.q_per_class
    classes = dataset.classes
    if len(classes) < config.n_way:
        raise DataError(f"{config.n_way}-way episodes need {config.n_way} classes, dataset has {len(classes)}")
    idx = dataset.class_indices
    eligible = [c for c in classes if len(idx[c]) >= need]
    if len(eligible) < config.n_way:
        short = next(c for c in classes if len(idx[c]) < need)
        raise DataError(f"class {short!r} has {len(idx[short])} samples, episodes need {need}")
    rng = rng_for(seed)
    chosen = sorted(classes[i] for i in rng.choice(len(classes), size=config.n_way, replace=False))
    short = [c for c in chosen if len(idx[c]) < need]
    if short:
        raise DataError(f"class {short[0]!r} has {len(idx[short[0]])} samples, episodes need {need}")
    s_rows, q_rows = [], []
    for c in chosen:
        rows = rng.permutation(idx[c])[:need]
        s_rows.append(rows[: config.k_shot])
        q_rows.append(rows[config.k_shot:])
    s_rows = np.concatenate(s_rows)
    q_rows = np.concatenate(q_rows)
    labels = dataset.labels
    return EpisodeTask(
        class_ids=tuple(chosen),
        support_labels=tuple(labels[i] for i in s_rows),
        support=dataset.features[s_rows],
        query_labels=tuple(labels[i] for i in q_rows),
        query=dataset.features[q_rows],
        support_index=s_rows,
        query_index=q_rows,
    )


def _true_columns(task: EpisodeTask, class_ids: tuple) -> np.ndarray:
    pos = {c: k for k, c in enumerate(class_ids)}
    return np.array([pos[l] for l in task.query_labels], dtype=np.int64)


def _episode_pairs(config: ClassifierConfig, dim: int, stream):
    metric = config.metric
    if metric.kind is MetricKind.KENDALL_SAMPLED and metric.freeze_pairs and metric.pair_budget != pair_count(dim):
        return sample_pairs(dim, metric.pair_budget, seed_key(metric.sampler_seed, *seed_key(stream)))
    return None


def _similarities(task: EpisodeTask, embed: Embed, config: ClassifierConfig, stream=()):
    q = np.asarray(embed(task.query), dtype=np.float64)
    s = np.asarray(embed(task.support), dtype=np.float64)
    protos = compute_prototypes(task.support_labels, s)
    pairs = _episode_pairs(config, q.shape[1], stream)
    sims = similarity_matrix(config.metric, q, protos.prototypes, stream=stream, pairs=pairs)
    return sims, protos


def episode_loss(task: EpisodeTask, embed: Optional[Embed], config: ClassifierConfig, *, stream=()) -> float:
    """Mean negative log posterior of the true class over the query set."""
    sims, protos = _similarities(task, embed or _identity, config, stream)
    logits = config.temperature * sims
    shift = logits.max(axis=1, keepdims=True)
    log_z = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    true = _true_columns(task, protos.class_ids)
    return float(np.mean(log_z - logits[np.arange(len(true)), true]))


class EpisodeGrads(NamedTuple):
    loss: float
    support: np.ndarray
    query: np.ndarray


def episode_loss_and_grads(task: EpisodeTask, embed: Optional[Embed],
                           config: ClassifierConfig) -> EpisodeGrads:
    """Loss plus its gradient with respect to every support and query embedding.

    Only the smooth Kendall metric is differentiable; other metrics raise.
    """
    metric = config.metric
    if metric.kind is not MetricKind.KENDALL_SMOOTH:
        raise ValueError(f"non-differentiable metric in training: {metric}")
    embed = embed or _identity
    q = np.asarray(embed(task.query), dtype=np.float64)
    s = np.asarray(embed(task.support), dtype=np.float64)
    protos = compute_prototypes(task.support_labels, s)
    p = protos.prototypes
    alpha = metric.alpha
    t = config.temperature
    n0 = pair_count(q.shape[1])

    tq = np.tanh(alpha * (q[:, :, None] - q[:, None, :]))
    tp = np.tanh(alpha * (p[:, :, None] - p[:, None, :]))
    sims = np.einsum("aij,bij->ab", tq, tp) / (2.0 * n0)

    logits = t * sims
    probs = softmax(logits, axis=1)
    true = _true_columns(task, protos.class_ids)
    rows = np.arange(len(true))
    loss = float(np.mean(-np.log(probs[rows, true])))

    # dL/dsim = t (p - onehot) / |Q|
    g = probs.copy()
    g[rows, true] -= 1.0
    g *= t / len(true)

    scale = alpha / n0
    grad_q = scale * np.einsum("ab,aij,bij->ai", g, 1.0 - tq * tq, tp)
    grad_p = scale * np.einsum("ab,bij,aij->bi", g, 1.0 - tp * tp, tq)

    pos = {c: k for k, c in enumerate(protos.class_ids)}
    support_cls = np.array([pos[l] for l in task.support_labels], dtype=np.int64)
    class_sizes = np.bincount(support_cls, minlength=len(pos))
    grad_s = grad_p[support_cls] / class_sizes[support_cls][:, None]
    return EpisodeGrads(loss, grad_s, grad_q)


def episode_loss_backward(task: EpisodeTask, embed: Optional[Embed],
                          config: ClassifierConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`episode_loss` w.r.t. ``(support, query)`` embeddings."""
    out = episode_loss_and_grads(task, embed, config)
    return out.support, out.query


def task_accuracy(task: EpisodeTask, embed: Optional[Embed], config: ClassifierConfig, *,
                  stream=()) -> float:
    sims, protos = _similarities(task, embed or _identity, config, stream)
    # first maximum wins: lowest label among ties
    pred = np.argmax(sims * config.temperature, axis=1)
    true = _true_columns(task, protos.class_ids)
    return float(np.mean(pred == true))


def evaluate_tasks(dataset: LabeledFeatureSet, econfig: EpisodeConfig, cconfig: ClassifierConfig,
                   task_count: int, seed: SeedLike, *, embed: Optional[Embed] = None,
                   threads: int = 1) -> EvalReport:
    """Accuracy over ``task_count`` episodes; task ``i`` is seeded by ``(seed, i)``."""
    if task_count < 1:
        raise ValueError(f"task_count must be >= 1, got {task_count}")
    base_key = seed_key(seed)

    def run(i: int) -> float:
        task = sample_episode(dataset, econfig, (*base_key, i))
        return task_accuracy(task, embed, cconfig, stream=(*base_key, i))

    if threads <= 1:
        accs = [run(i) for i in range(task_count)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(run, range(task_count)))
    return EvalReport.from_accuracies(accs)
