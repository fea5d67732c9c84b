"""Nearest-prototype classification with a softmax over scaled similarities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .metrics import MetricSpec, similarity_matrix

__all__ = [
    "PrototypeSet",
    "ClassifierConfig",
    "Posterior",
    "compute_prototypes",
    "softmax",
    "class_posteriors",
    "posteriors_from_similarities",
    "predict",
    "posterior_loss_backward",
]


@dataclass(frozen=True)
class PrototypeSet:
    class_ids: tuple
    prototypes: np.ndarray

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        if protos.ndim != 2 or protos.shape[0] != len(self.class_ids):
            raise ValueError("prototypes must be an (N, dim) array aligned with class_ids")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class ids must be distinct")
        protos.setflags(write=False)
        object.__setattr__(self, "class_ids", tuple(self.class_ids))
        object.__setattr__(self, "prototypes", protos)

    def __len__(self) -> int:
        return len(self.class_ids)


@dataclass(frozen=True)
class ClassifierConfig:
    metric: MetricSpec = field(default_factory=MetricSpec.kendall)
    temperature: float = 10.0

    def __post_init__(self):
        if not (self.temperature > 0):
            raise ValueError(f"temperature must be > 0, got {self.temperature!r}")


@dataclass(frozen=True)
class Posterior:
    class_ids: tuple
    probs: np.ndarray

    def prob(self, label: Hashable) -> float:
        return float(self.probs[self.class_ids.index(label)])


def compute_prototypes(labels: Sequence[Hashable], vectors) -> PrototypeSet:
    """Mean embedding per class, classes in ascending label order."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = list(labels)
    if len(labels) == 0:
        raise ValueError("empty support set")
    if vectors.ndim != 2:
        raise ValueError(f"support vectors must share one dimension, got array of shape {vectors.shape}")
    if vectors.shape[0] != len(labels):
        raise ValueError(f"{len(labels)} labels for {vectors.shape[0]} vectors")
    class_ids = sorted(set(labels))
    label_arr = np.asarray(labels, dtype=object)
    protos = np.stack([vectors[label_arr == c].mean(axis=0) for c in class_ids])
    return PrototypeSet(tuple(class_ids), protos)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def posteriors_from_similarities(sims, temperature: float) -> np.ndarray:
    return softmax(np.asarray(sims, dtype=np.float64) * temperature)


def class_posteriors(x, protos: PrototypeSet, config: ClassifierConfig, *,
                     stream=()) -> Posterior:
    sims = similarity_matrix(config.metric, np.atleast_2d(x), protos.prototypes, stream=stream)[0]
    return Posterior(protos.class_ids, posteriors_from_similarities(sims, config.temperature))


def predict(x, protos: PrototypeSet, config: ClassifierConfig, *, stream=()) -> Hashable:
    """Most probable class; ties go to the lowest label."""
    sims = similarity_matrix(config.metric, np.atleast_2d(x), protos.prototypes, stream=stream)[0]
    # argmax over scaled similarities avoids ties that exp() could introduce
    return protos.class_ids[int(np.argmax(sims * config.temperature))]


def posterior_loss_backward(post: Posterior, true_label: Hashable, temperature: float) -> np.ndarray:
    """d(-log p_true)/d sim_k = t * (p_k - [k == true])."""
    try:
        k_true = post.class_ids.index(true_label)
    except ValueError:
        raise ValueError(f"label {true_label!r} not among posterior classes") from None
    grad = np.array(post.probs, dtype=np.float64) * temperature
    grad[k_true] -= temperature
    return grad
