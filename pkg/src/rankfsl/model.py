"""Desk-scale trainable embedder, cross-entropy pretraining and episodic meta-training."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ._seeding import rng_for, seed_key
from .classifier import ClassifierConfig, softmax
from .data import DataError, LabeledFeatureSet, atomic_write_text
from .episode import (EpisodeConfig, EvalReport, episode_loss_and_grads,
                      evaluate_tasks, sample_episode)
from .metrics import MetricSpec

__all__ = [
    "NumericalAbort",
    "LinearEmbedder",
    "LinearHead",
    "TrainConfig",
    "TrainLog",
    "embed",
    "embed_backward",
    "pretrain_ce",
    "train_meta",
    "checkpoint_text",
    "parse_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = "rankfsl-linear-embedder v1"


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, last_finite_loss: Optional[float]):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss


@dataclass(frozen=True, eq=False)
class LinearEmbedder:
    """``f(x) = W x + b``, optionally followed by ``max(., 0)``."""

    weight: np.ndarray
    bias: np.ndarray
    rectify: bool = False

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"weight {w.shape} and bias {b.shape} are inconsistent")
        if w.shape[0] < 2:
            raise ValueError("embedding dimension must be >= 2")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("embedder parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, dim: int, rectify: bool = False) -> "LinearEmbedder":
        return cls(np.eye(dim), np.zeros(dim), rectify)

    @classmethod
    def random(cls, d_in: int, d_out: int, seed, rectify: bool = False,
               scale: Optional[float] = None) -> "LinearEmbedder":
        scale = 1.0 / math.sqrt(d_in) if scale is None else scale
        w = scale * rng_for(seed).standard_normal((d_out, d_in))
        return cls(w, np.zeros(d_out), rectify)

    def __call__(self, raw) -> np.ndarray:
        return embed(self, raw)

    def equals(self, other: "LinearEmbedder") -> bool:
        return (self.rectify == other.rectify and np.array_equal(self.weight, other.weight)
                and np.array_equal(self.bias, other.bias))


def _pre_activation(model: LinearEmbedder, raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != model.d_in:
        raise ValueError(f"input dimension {raw.shape[-1]} != embedder d_in {model.d_in}")
    return raw @ model.weight.T + model.bias


def embed(model: LinearEmbedder, raw) -> np.ndarray:
    """Embed one vector or a row-stacked batch."""
    z = _pre_activation(model, raw)
    return np.maximum(z, 0.0) if model.rectify else z


def embed_backward(model: LinearEmbedder, raw, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Parameter gradients ``(dW, db)``, summed over a batch when ``raw`` is 2-D."""
    raw = np.asarray(raw, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape[:-1] != raw.shape[:-1] or up.shape[-1] != model.d_out:
        raise ValueError(f"upstream shape {up.shape} does not match input {raw.shape} / d_out {model.d_out}")
    if model.rectify:
        up = up * (_pre_activation(model, raw) > 0.0)
    raw2 = np.atleast_2d(raw)
    up2 = np.atleast_2d(up)
    return up2.T @ raw2, up2.sum(axis=0)


@dataclass(frozen=True, eq=False)
class LinearHead:
    """Linear softmax classifier over base classes, used only during pretraining."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, n_classes: int, dim: int) -> "LinearHead":
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes))

    def logits(self, h) -> np.ndarray:
        return np.asarray(h, dtype=np.float64) @ np.asarray(self.weight).T + self.bias


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings shared by pretraining and meta-training.

    ``episodes`` counts gradient steps: episodes for :func:`train_meta`,
    mini-batches of ``batch_size`` for :func:`pretrain_ce`.
    """

    learning_rate: float = 0.05
    episodes: int = 500
    alpha: float = 0.5
    temperature: float = 10.0
    econfig: EpisodeConfig = field(default_factory=EpisodeConfig)
    seed: int = 0
    eval_every: int = 0
    eval_tasks: int = 200
    batch_size: int = 64

    def __post_init__(self):
        if not (self.learning_rate >= 0):
            raise ValueError("learning_rate must be >= 0")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if not (self.alpha > 0) or not (self.temperature > 0):
            raise ValueError("alpha and temperature must be > 0")
        if self.eval_every < 0 or self.eval_tasks < 1 or self.batch_size < 1:
            raise ValueError("eval_every >= 0, eval_tasks >= 1 and batch_size >= 1 are required")


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (episode, EvalReport)
    snapshot: str = ""

    def to_csv(self) -> str:
        lines = ["episode,loss,eval_accuracy,eval_ci95"]
        evals = dict(self.evals)
        for i, loss in enumerate(self.losses):
            rep = evals.get(i)
            acc = "" if rep is None else repr(rep.mean_accuracy)
            ci = "" if rep is None else repr(rep.ci95)
            lines.append(f"{i},{loss!r},{acc},{ci}")
        n = len(self.losses)
        if n in evals:
            lines.append(f"{n},,{evals[n].mean_accuracy!r},{evals[n].ci95!r}")
        return "\n".join(lines) + "\n"


def pretrain_ce(base: LabeledFeatureSet, model: LinearEmbedder, head: Optional[LinearHead],
                config: TrainConfig, *, return_head: bool = False):
    """Mini-batch gradient descent on softmax cross-entropy of ``head(model(x))``.

    Returns the trained embedder; the head is discarded unless ``return_head``
    asks for ``(embedder, head)``. Base classes map to head rows in sorted order.
    """
    if len(base) == 0:
        raise DataError("empty base dataset")
    classes = base.classes
    index = {c: k for k, c in enumerate(classes)}
    y = np.array([index[l] for l in base.labels], dtype=np.int64)
    x = base.features
    if head is None:
        head = LinearHead(0.01 * rng_for(config.seed, 1).standard_normal((len(classes), model.d_out)),
                          np.zeros(len(classes)))
    w, b = model.weight.copy(), model.bias.copy()
    hw, hb = np.array(head.weight, dtype=np.float64), np.array(head.bias, dtype=np.float64)
    if hw.shape != (len(classes), model.d_out) or hb.shape != (len(classes),):
        raise ValueError(f"head shape {hw.shape} does not fit {len(classes)} classes x d_out {model.d_out}")
    rng = rng_for(config.seed, 2)
    batch = min(config.batch_size, len(base))
    last_finite: Optional[float] = None
    for _ in range(config.episodes):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, w, b, hw, hb = _ce_step(x, y, rng.choice(len(base), size=batch, replace=False),
                                          w, b, hw, hb, model.rectify, config.learning_rate)
        if not math.isfinite(loss):
            raise NumericalAbort("non-finite loss during pretraining", last_finite)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericalAbort("non-finite parameters during pretraining", loss)
        last_finite = loss
    trained = LinearEmbedder(w, b, model.rectify)
    return (trained, LinearHead(hw, hb)) if return_head else trained


def _ce_step(x, y, rows, w, b, hw, hb, rectify: bool, lr: float):
    """One softmax cross-entropy step (in place); returns the batch loss and the parameters."""
    batch = len(rows)
    xb, yb = x[rows], y[rows]
    z = xb @ w.T + b
    h = np.maximum(z, 0.0) if rectify else z
    probs = softmax(h @ hw.T + hb, axis=1)
    loss = float(np.mean(-np.log(np.maximum(probs[np.arange(batch), yb], 1e-300))))
    g = probs
    g[np.arange(batch), yb] -= 1.0
    g /= batch
    g_hw = g.T @ h
    g_hb = g.sum(axis=0)
    g_h = g @ hw
    if rectify:
        g_h = g_h * (z > 0.0)
    w -= lr * (g_h.T @ xb)
    b -= lr * g_h.sum(axis=0)
    hw -= lr * g_hw
    hb -= lr * g_hb
    return loss, w, b, hw, hb


def train_meta(base: LabeledFeatureSet, novel_val: Optional[LabeledFeatureSet], model: LinearEmbedder,
               config: TrainConfig, *, threads: int = 1) -> tuple[LinearEmbedder, TrainLog]:
    """Episodic training with the smooth Kendall similarity.

    Episode ``i`` is sampled with seed ``(config.seed, 0, i)``. When
    ``eval_every > 0``, the novel split is evaluated with exact Kendall on a
    fixed task set before training, every ``eval_every`` episodes, and at the
    end.
    """
    train_cfg = ClassifierConfig(MetricSpec.kendall_smooth(config.alpha), config.temperature)
    eval_cfg = ClassifierConfig(MetricSpec.kendall(), config.temperature)
    eval_seed = seed_key(config.seed, 1)
    log = TrainLog()

    def evaluate(m: LinearEmbedder, episode: int) -> None:
        if novel_val is None or config.eval_every <= 0:
            return
        rep = evaluate_tasks(novel_val, config.econfig, eval_cfg, config.eval_tasks, eval_seed,
                             embed=m, threads=threads)
        log.evals.append((episode, rep))

    evaluate(model, 0)
    last_finite: Optional[float] = None
    for i in range(config.episodes):
        task = sample_episode(base, config.econfig, (config.seed, 0, i))
        loss, g_s, g_q = episode_loss_and_grads(task, model, train_cfg)
        if not math.isfinite(loss):
            raise NumericalAbort(f"non-finite loss at episode {i}; last finite loss {last_finite!r}",
                                 last_finite)
        last_finite = loss
        log.losses.append(loss)
        gw_s, gb_s = embed_backward(model, task.support, g_s)
        gw_q, gb_q = embed_backward(model, task.query, g_q)
        lr = config.learning_rate
        w = model.weight - lr * (gw_s + gw_q)
        b = model.bias - lr * (gb_s + gb_q)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericalAbort(f"non-finite parameters after episode {i}; last finite loss {loss!r}", loss)
        model = LinearEmbedder(w, b, model.rectify)
        if config.eval_every > 0 and (i + 1) % config.eval_every == 0 and i + 1 < config.episodes:
            evaluate(model, i + 1)
    if config.episodes > 0:
        evaluate(model, config.episodes)
    log.snapshot = hashlib.sha256(checkpoint_text(model).encode()).hexdigest()
    return model, log


# -- checkpoint file -------------------------------------------------------


def checkpoint_text(model: LinearEmbedder, provenance: Optional[str] = None) -> str:
    """Self-describing text form; floats are written with exact round-trip ``repr``."""
    lines = [f"# {CHECKPOINT_MAGIC}"]
    if provenance:
        lines.extend(f"# {line}" for line in provenance.splitlines())
    lines += [
        f"d_in {model.d_in}",
        f"d_out {model.d_out}",
        f"nonlinearity {'rectify' if model.rectify else 'none'}",
        "weight",
    ]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in model.weight)
    lines.append("bias")
    lines.append(" ".join(repr(float(v)) for v in model.bias))
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str) -> LinearEmbedder:
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    try:
        header = dict(l.split(" ", 1) for l in lines[:3])
        d_in, d_out = int(header["d_in"]), int(header["d_out"])
        nonlin = header["nonlinearity"].strip()
        if nonlin not in ("none", "rectify") or lines[3] != "weight" or lines[4 + d_out] != "bias":
            raise ValueError("bad section layout")
        weight = np.array([[float(v) for v in l.split()] for l in lines[4:4 + d_out]])
        bias = np.array([float(v) for v in lines[5 + d_out].split()])
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"malformed checkpoint: {exc}") from None
    if weight.shape != (d_out, d_in) or bias.shape != (d_out,):
        raise DataError("checkpoint dimensions disagree with its header")
    return LinearEmbedder(weight, bias, nonlin == "rectify")


def save_checkpoint(model: LinearEmbedder, path, provenance: Optional[str] = None) -> None:
    atomic_write_text(path, checkpoint_text(model, provenance))


def load_checkpoint(path) -> LinearEmbedder:
    return parse_checkpoint(Path(path).read_text(encoding="utf-8"))
