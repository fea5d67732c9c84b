"""Labeled feature sets: CSV persistence, synthetic generation, statistics.

Feature CSV format, one sample per line, no header::

    label,v1,v2,...,vn

The label is a non-empty string without commas; values are decimal reals.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._seeding import SeedLike, rng_for

__all__ = [
    "DataError",
    "LabeledFeatureSet",
    "SyntheticSpec",
    "ChannelStats",
    "load_features",
    "save_features",
    "format_features",
    "generate_synthetic",
    "channel_stats",
    "split_classes",
    "atomic_write_text",
    "write_temp",
]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True, eq=False)
class LabeledFeatureSet:
    labels: tuple
    features: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        labels = tuple(str(l) for l in self.labels)
        if feats.ndim != 2:
            raise DataError(f"features must be a 2-D array, got shape {feats.shape}")
        if feats.shape[0] != len(labels):
            raise DataError(f"{len(labels)} labels for {feats.shape[0]} feature rows")
        if not np.all(np.isfinite(feats)):
            raise DataError("features contain non-finite values")
        for l in labels:
            if not l or "," in l or "\n" in l:
                raise DataError(f"invalid class label {l!r}")
        feats.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def classes(self) -> tuple:
        return tuple(sorted(set(self.labels)))

    @cached_property
    def class_indices(self) -> dict:
        """Row indices of each class, ascending."""
        out: dict = {}
        for i, l in enumerate(self.labels):
            out.setdefault(l, []).append(i)
        return {c: np.asarray(out[c], dtype=np.int64) for c in self.classes}

    def subset(self, classes: Sequence[str]) -> "LabeledFeatureSet":
        keep = set(classes)
        rows = [i for i, l in enumerate(self.labels) if l in keep]
        return LabeledFeatureSet(tuple(self.labels[i] for i in rows), self.features[rows])

    def map_features(self, fn) -> "LabeledFeatureSet":
        return LabeledFeatureSet(self.labels, fn(self.features))

    def equals(self, other: "LabeledFeatureSet") -> bool:
        return self.labels == other.labels and np.array_equal(self.features, other.features)


# -- persistence ---------------------------------------------------------


def load_features(path) -> LabeledFeatureSet:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 ({exc})") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    labels: list[str] = []
    rows: list[list[float]] = []
    dim: Optional[int] = None
    for lineno, line in enumerate(lines, start=1):
        fields = line.rstrip("\r").split(",")
        label = fields[0].strip()
        if not label:
            raise DataError(f"{path}:{lineno}: missing class label")
        if len(fields) < 2:
            raise DataError(f"{path}:{lineno}: no feature values")
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: unparseable value in {line!r}") from None
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"{path}:{lineno}: non-finite value")
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
        labels.append(label)
        rows.append(values)
    if not rows:
        raise DataError(f"{path}: no samples")
    return LabeledFeatureSet(tuple(labels), np.asarray(rows, dtype=np.float64))


def format_features(fs: LabeledFeatureSet) -> str:
    if len(fs) == 0:
        raise DataError("refusing to write an empty feature set")
    # repr() is the shortest string that round-trips a float64 exactly
    return "".join(
        label + "," + ",".join(repr(float(v)) for v in row) + "\n"
        for label, row in zip(fs.labels, fs.features)
    )


def _default_mode() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return 0o666 & ~mask


def write_temp(path: Path, text: str) -> str:
    """Write ``text`` to a fresh temp file beside ``path``; return the temp name."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        # mkstemp creates 0600; give the final file ordinary permissions
        os.chmod(tmp, _default_mode())
    except BaseException:
        os.unlink(tmp)
        raise
    return tmp


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the target directory, so failures leave nothing behind."""
    path = Path(path)
    tmp = write_temp(path, text)
    try:
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_features(fs: LabeledFeatureSet, path) -> None:
    atomic_write_text(path, format_features(fs))


# -- synthetic generator ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic base/novel feature generator.

    Every vector has ``core_channels_per_class`` large-valued core channels,
    at the same positions for all classes, each sample drawing magnitudes
    from N(core_mean, core_std). The remaining minor channels carry the class
    identity and lie in ``[minor_low, minor_high]``:

    * ``latent_dim > 0``: minor values are ``mid + half * tanh(z @ A)`` with a
      loading matrix ``A`` shared by base and novel splits, a per-class latent
      centre and per-sample latent jitter of scale ``latent_noise``.
    * ``latent_dim == 0``: one uniform template per class, independent channels.

    The minor deviation from the interval midpoint is multiplied by a
    per-sample gain ``exp(gain_std * N(0, 1))`` and then shrunk by
    ``(1 - concentration)`` for novel classes (``base_concentration`` for
    base classes). Independent noise ``noise_std`` is added last and the
    result is rectified.

    ``class_count`` is the number of base classes; ``novel_class_count``
    defaults to the same when ``None``.
    """

    class_count: int = 64
    samples_per_class: int = 60
    dim: int = 640
    core_channels_per_class: int = 8
    core_mean: float = 1.0
    core_std: float = 0.1
    minor_low: float = 0.1
    minor_high: float = 0.3
    noise_std: float = 0.003
    concentration: float = 0.9
    base_concentration: float = 0.0
    novel_class_count: Optional[int] = 20
    latent_dim: int = 16
    latent_noise: float = 1.5
    gain_std: float = 0.25

    def validate(self) -> None:
        if self.class_count < 1 or (self.novel_class_count is not None and self.novel_class_count < 1):
            raise DataError("class counts must be >= 1")
        if self.samples_per_class < 1:
            raise DataError("samples_per_class must be >= 1")
        if self.dim < 2:
            raise DataError("dim must be >= 2")
        if not 0 <= self.core_channels_per_class < self.dim:
            raise DataError("core_channels_per_class must lie in [0, dim)")
        if not self.minor_low < self.minor_high:
            raise DataError("minor_low must be < minor_high")
        if self.latent_dim < 0:
            raise DataError("latent_dim must be >= 0")
        if self.core_std < 0 or self.noise_std < 0 or self.latent_noise < 0 or self.gain_std < 0:
            raise DataError("standard deviations must be >= 0")
        for c in (self.concentration, self.base_concentration):
            if not 0.0 <= c <= 1.0:
                raise DataError("concentration must lie in [0, 1]")


def _generate_split(spec: SyntheticSpec, rng: np.random.Generator, prefix: str,
                    n_classes: int, concentration: float, cores: np.ndarray,
                    loadings: Optional[np.ndarray]) -> LabeledFeatureSet:
    mid = 0.5 * (spec.minor_low + spec.minor_high)
    half = 0.5 * (spec.minor_high - spec.minor_low)
    minor = np.setdiff1d(np.arange(spec.dim), cores)
    width = len(str(n_classes - 1))
    shape = (spec.samples_per_class, minor.size)
    labels: list[str] = []
    blocks: list[np.ndarray] = []
    for c in range(n_classes):
        if loadings is None:
            pattern = rng.uniform(-half, half, size=shape[1])
        else:
            z = rng.standard_normal(loadings.shape[0])
            z = z + spec.latent_noise * rng.standard_normal((shape[0], z.size))
            pattern = half * np.tanh(z @ loadings)
        pattern = pattern * np.exp(spec.gain_std * rng.standard_normal((shape[0], 1)))
        x = np.empty((spec.samples_per_class, spec.dim))
        x[:, minor] = mid + (1.0 - concentration) * pattern + spec.noise_std * rng.standard_normal(shape)
        x[:, cores] = spec.core_mean + spec.core_std * rng.standard_normal((spec.samples_per_class, cores.size))
        blocks.append(np.maximum(x, 0.0))
        labels.extend([f"{prefix}{c:0{width}d}"] * spec.samples_per_class)
    return LabeledFeatureSet(tuple(labels), np.concatenate(blocks))


def generate_synthetic(spec: SyntheticSpec, seed: SeedLike) -> tuple[LabeledFeatureSet, LabeledFeatureSet]:
    """Return ``(base, novel)`` feature sets with disjoint class labels."""
    spec.validate()
    rng = rng_for(seed)
    cores = np.sort(rng.choice(spec.dim, size=spec.core_channels_per_class, replace=False))
    loadings = None
    if spec.latent_dim > 0:
        n_minor = spec.dim - cores.size
        loadings = rng.standard_normal((spec.latent_dim, n_minor)) / np.sqrt(spec.latent_dim)
    base = _generate_split(spec, rng, "base", spec.class_count, spec.base_concentration, cores, loadings)
    n_novel = spec.novel_class_count if spec.novel_class_count is not None else spec.class_count
    novel = _generate_split(spec, rng, "novel", n_novel, spec.concentration, cores, loadings)
    return base, novel


# -- statistics ------------------------------------------------------------


@dataclass(frozen=True)
class ChannelStats:
    across_channel_mean_variance: float
    across_sample_mean_variance: float
    bin_edges: np.ndarray
    counts: np.ndarray
    variance_convention: str = "population"

    def to_dict(self) -> dict:
        return {
            "across_channel_mean_variance": self.across_channel_mean_variance,
            "across_sample_mean_variance": self.across_sample_mean_variance,
            "histogram": {
                "bin_edges": [float(e) for e in self.bin_edges],
                "counts": [int(c) for c in self.counts],
            },
            "variance_convention": self.variance_convention,
        }


def channel_stats(fs: LabeledFeatureSet, bins: int = 20,
                  value_range: Optional[tuple[float, float]] = None) -> ChannelStats:
    """Mean channel-value variance under two definitions, plus a value histogram.

    ``across_channel``: variance over the channels of each sample, averaged
    over samples. ``across_sample``: variance of each channel over samples,
    averaged over channels. Both use the population (divide-by-N) form.
    """
    if len(fs) < 2:
        raise DataError("channel statistics need at least 2 samples")
    x = fs.features
    counts, edges = np.histogram(x, bins=bins, range=value_range)
    return ChannelStats(
        across_channel_mean_variance=float(np.mean(np.var(x, axis=1))),
        across_sample_mean_variance=float(np.mean(np.var(x, axis=0))),
        bin_edges=edges,
        counts=counts,
    )


def split_classes(fs: LabeledFeatureSet, novel_fraction: float,
                  seed: SeedLike) -> tuple[LabeledFeatureSet, LabeledFeatureSet]:
    """Class-level random split into ``(base, novel)``."""
    classes = list(fs.classes)
    if len(classes) < 2:
        raise DataError("need at least 2 classes to split")
    if not 0.0 < novel_fraction < 1.0:
        raise DataError(f"novel_fraction must lie in (0, 1), got {novel_fraction}")
    n_novel = min(max(int(round(novel_fraction * len(classes))), 1), len(classes) - 1)
    perm = rng_for(seed).permutation(len(classes))
    novel = sorted(classes[i] for i in perm[:n_novel])
    base = sorted(classes[i] for i in perm[n_novel:])
    return fs.subset(base), fs.subset(novel)
