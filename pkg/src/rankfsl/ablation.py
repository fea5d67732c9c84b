"""Channel masking and the parameter-sweep harnesses."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from ._seeding import SeedLike
from .classifier import ClassifierConfig
from .data import LabeledFeatureSet
from .episode import EpisodeConfig, EvalReport, evaluate_tasks
from .metrics import MetricKind, MetricSpec
from .model import LinearEmbedder, TrainConfig, train_meta

__all__ = [
    "MaskKind",
    "MaskSpec",
    "SweepRow",
    "apply_mask",
    "masked_eval",
    "sweep_alpha",
    "sweep_pair_budget",
    "sweep_csv",
]


class MaskKind(str, enum.Enum):
    LOW_CUT = "lowcut"    # zero channels below the threshold
    HIGH_CUT = "highcut"  # zero channels above the threshold


@dataclass(frozen=True)
class MaskSpec:
    kind: MaskKind
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "kind", MaskKind(self.kind))
        object.__setattr__(self, "threshold", float(self.threshold))

    @classmethod
    def parse(cls, text: str) -> "MaskSpec":
        """``lowcut:L0`` or ``highcut:H0``."""
        try:
            kind, value = text.split(":")
            return cls(MaskKind(kind), float(value))
        except ValueError:
            raise ValueError(f"bad mask {text!r}; expected lowcut:L0 or highcut:H0") from None


def apply_mask(x, spec: MaskSpec) -> np.ndarray:
    """Zero the channels of each vector that fall strictly below/above the threshold.

    Works on a single vector or a row-stacked batch; the mask of each row is
    computed from that row's own values, and channels equal to the threshold
    are kept.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.kind is MaskKind.LOW_CUT:
        drop = x < spec.threshold
    else:
        drop = x > spec.threshold
    return np.where(drop, 0.0, x)


def masked_eval(dataset: LabeledFeatureSet, econfig: EpisodeConfig, cconfig: ClassifierConfig,
                spec: MaskSpec, task_count: int, seed: SeedLike, *, embed=None,
                threads: int = 1) -> EvalReport:
    """:func:`evaluate_tasks` with every embedding masked before comparison."""
    if embed is None:
        fn = lambda v: apply_mask(v, spec)
    else:
        fn = lambda v: apply_mask(embed(v), spec)
    return evaluate_tasks(dataset, econfig, cconfig, task_count, seed, embed=fn, threads=threads)


@dataclass(frozen=True)
class SweepRow:
    param: float  # alpha, or an int pair budget
    report: EvalReport


def sweep_alpha(base: LabeledFeatureSet, novel: LabeledFeatureSet, alphas: Sequence[float],
                train_config: TrainConfig, model: LinearEmbedder, task_count: int, seed: SeedLike,
                *, threads: int = 1) -> list[SweepRow]:
    """Meta-train from ``model`` once per alpha; evaluate each with exact Kendall.

    Every cell uses the same training episodes (``train_config.seed``) and the
    same novel evaluation tasks (``seed``).
    """
    alphas = list(alphas)
    if not alphas:
        raise ValueError("empty alpha grid")
    eval_cfg = ClassifierConfig(MetricSpec.kendall(), train_config.temperature)
    rows = []
    for a in alphas:
        trained, _ = train_meta(base, None, model, replace(train_config, alpha=float(a)), threads=threads)
        rep = evaluate_tasks(novel, train_config.econfig, eval_cfg, task_count, seed,
                             embed=trained, threads=threads)
        rows.append(SweepRow(float(a), rep))
    return rows


def sweep_pair_budget(dataset: LabeledFeatureSet, econfig: EpisodeConfig, cconfig: ClassifierConfig,
                      budgets: Iterable[int], task_count: int, seed: SeedLike, *, embed=None,
                      threads: int = 1) -> list[SweepRow]:
    """Sampled-Kendall accuracy per pair budget on one seeded task set."""
    if cconfig.metric.kind is not MetricKind.KENDALL_SAMPLED:
        raise ValueError("pair-budget sweep needs a kendall-sampled metric")
    rows = []
    for m in budgets:
        cfg = replace(cconfig, metric=replace(cconfig.metric, pair_budget=int(m)))
        rep = evaluate_tasks(dataset, econfig, cfg, task_count, seed, embed=embed, threads=threads)
        rows.append(SweepRow(int(m), rep))
    return rows


def sweep_csv(rows: Sequence[SweepRow], provenance: Optional[dict] = None) -> str:
    """``param,accuracy,ci95`` table, preceded by a ``#`` provenance line if given."""
    lines = []
    if provenance is not None:
        lines.append("# run_config=" + json.dumps(provenance, sort_keys=True))
    lines.append("param,accuracy,ci95")
    for r in rows:
        lines.append(f"{r.param!r},{r.report.mean_accuracy!r},{r.report.ci95!r}")
    return "\n".join(lines) + "\n"
