"""Similarity kernels between feature vectors.

Geometric baselines (cosine, negative Euclidean distance) and the
Kendall rank-correlation family:

* ``kendall_tau_naive`` -- O(n^2) enumeration of every channel pair.
* ``kendall_tau_fast`` -- O(n log n) sort + merge-sort inversion count.
* ``smooth_kendall`` -- tanh relaxation, differentiable in both inputs.
* ``sampled_kendall`` -- estimator over a random subset of channel pairs.

Tie convention for the exact and sampled variants: a pair tied in either
vector is neither concordant nor discordant, but always counts in the
denominator (the tau-a normalisation).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numba
import numpy as np

from ._seeding import SeedLike, rng_for, seed_key

__all__ = [
    "MetricKind",
    "MetricSpec",
    "cosine_similarity",
    "neg_euclidean",
    "kendall_tau_naive",
    "kendall_tau_fast",
    "smooth_kendall",
    "smooth_kendall_grad",
    "sample_pairs",
    "sampled_kendall",
    "similarity",
    "similarity_matrix",
    "pair_count",
]


class MetricKind(str, enum.Enum):
    COSINE = "cosine"
    NEG_EUCLIDEAN = "negeuclid"
    KENDALL_EXACT = "kendall"
    KENDALL_SMOOTH = "kendall-smooth"
    KENDALL_SAMPLED = "kendall-sampled"


@dataclass(frozen=True)
class MetricSpec:
    """Which similarity to use, plus the parameters that kind needs.

    ``alpha`` applies to ``KENDALL_SMOOTH``; ``pair_budget`` and
    ``sampler_seed`` to ``KENDALL_SAMPLED``. With ``freeze_pairs`` the
    sampled variant draws one pair list per episode instead of one per
    similarity call.
    """

    kind: MetricKind
    alpha: Optional[float] = None
    pair_budget: Optional[int] = None
    sampler_seed: int = 0
    freeze_pairs: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        if self.kind is MetricKind.KENDALL_SMOOTH:
            if self.alpha is None or not (self.alpha > 0) or not math.isfinite(self.alpha):
                raise ValueError(f"smooth Kendall needs a finite alpha > 0, got {self.alpha!r}")
        if self.kind is MetricKind.KENDALL_SAMPLED:
            if self.pair_budget is None or int(self.pair_budget) < 1:
                raise ValueError(f"sampled Kendall needs pair_budget >= 1, got {self.pair_budget!r}")

    @classmethod
    def cosine(cls) -> "MetricSpec":
        return cls(MetricKind.COSINE)

    @classmethod
    def neg_euclidean(cls) -> "MetricSpec":
        return cls(MetricKind.NEG_EUCLIDEAN)

    @classmethod
    def kendall(cls) -> "MetricSpec":
        return cls(MetricKind.KENDALL_EXACT)

    @classmethod
    def kendall_smooth(cls, alpha: float = 0.5) -> "MetricSpec":
        return cls(MetricKind.KENDALL_SMOOTH, alpha=float(alpha))

    @classmethod
    def kendall_sampled(cls, pair_budget: int, sampler_seed: int = 0,
                        freeze_pairs: bool = False) -> "MetricSpec":
        return cls(MetricKind.KENDALL_SAMPLED, pair_budget=int(pair_budget),
                   sampler_seed=int(sampler_seed), freeze_pairs=freeze_pairs)

    @classmethod
    def parse(cls, text: str) -> "MetricSpec":
        """Parse ``cosine|negeuclid|kendall|kendall-smooth:A|kendall-sampled:M:SEED``."""
        head, *params = text.strip().split(":")
        try:
            kind = MetricKind(head)
        except ValueError:
            raise ValueError(f"unknown metric {head!r}") from None
        expected = {MetricKind.KENDALL_SMOOTH: 1, MetricKind.KENDALL_SAMPLED: 2}.get(kind, 0)
        if len(params) != expected:
            raise ValueError(f"metric {head!r} takes {expected} ':'-separated parameter(s), got {len(params)}")
        try:
            if kind is MetricKind.KENDALL_SMOOTH:
                return cls.kendall_smooth(float(params[0]))
            if kind is MetricKind.KENDALL_SAMPLED:
                return cls.kendall_sampled(int(params[0]), int(params[1]))
        except ValueError as exc:
            raise ValueError(f"bad metric {text!r}: {exc}") from None
        return cls(kind)

    def __str__(self) -> str:
        if self.kind is MetricKind.KENDALL_SMOOTH:
            return f"{self.kind.value}:{self.alpha!r}"
        if self.kind is MetricKind.KENDALL_SAMPLED:
            return f"{self.kind.value}:{self.pair_budget}:{self.sampler_seed}"
        return self.kind.value


def pair_count(n: int) -> int:
    return n * (n - 1) // 2


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _check_pair(x, y, min_dim: int = 1) -> tuple[np.ndarray, np.ndarray]:
    x = _as_vector(x, "x")
    y = _as_vector(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < min_dim:
        raise ValueError(f"need at least {min_dim} channels, got {x.shape[0]}")
    return x, y


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not (alpha > 0) or not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite and > 0, got {alpha!r}")
    return alpha


# -- geometric ------------------------------------------------------------


def cosine_similarity(x, y) -> float:
    x, y = _check_pair(x, y)
    x = _unit_scale(x[None, :])[0]
    y = _unit_scale(y[None, :])[0]
    value = float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return min(1.0, max(-1.0, value))


def _unit_scale(rows: np.ndarray) -> np.ndarray:
    # divide by the max magnitude first so tiny vectors do not underflow in the norm
    peak = np.max(np.abs(rows), axis=1, keepdims=True)
    if np.any(peak == 0.0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return rows / peak


def neg_euclidean(x, y) -> float:
    x, y = _check_pair(x, y)
    return -float(np.linalg.norm(x - y))


# -- exact Kendall -------------------------------------------------------


def kendall_tau_naive(x, y) -> float:
    """Kendall's tau by enumerating all n(n-1)/2 channel pairs."""
    x, y = _check_pair(x, y, min_dim=2)
    n = x.shape[0]
    iu, ju = np.triu_indices(n, 1)
    s = np.sign(x[iu] - x[ju]) * np.sign(y[iu] - y[ju])
    concordant = int(np.count_nonzero(s > 0))
    discordant = int(np.count_nonzero(s < 0))
    return (concordant - discordant) / pair_count(n)


@numba.njit(cache=True, nogil=True)
def _tie_pairs(sorted_vals):
    total = 0
    n = sorted_vals.shape[0]
    i = 0
    while i < n:
        j = i + 1
        while j < n and sorted_vals[j] == sorted_vals[i]:
            j += 1
        t = j - i
        total += t * (t - 1) // 2
        i = j
    return total


@numba.njit(cache=True, nogil=True)
def _inversions(ys, buf):
    """Strict inversions of ``ys``, counted by a bottom-up merge sort (sorts ``ys`` in place)."""
    n = ys.shape[0]
    inv = 0
    width = 1
    while width < n:
        lo = 0
        while lo < n - width:
            mid = lo + width
            hi = min(lo + 2 * width, n)
            a = lo
            b = mid
            k = lo
            while a < mid and b < hi:
                if ys[a] <= ys[b]:
                    buf[k] = ys[a]
                    a += 1
                else:
                    buf[k] = ys[b]
                    b += 1
                    inv += mid - a
                k += 1
            while a < mid:
                buf[k] = ys[a]
                a += 1
                k += 1
            while b < hi:
                buf[k] = ys[b]
                b += 1
                k += 1
            for q in range(lo, hi):
                ys[q] = buf[q]
            lo += 2 * width
        width *= 2
    return inv


@numba.njit(cache=True, nogil=True)
def _concordance_counts(x, y):
    """Return (concordant, discordant) pair counts in O(n log n)."""
    n = x.shape[0]
    # lexicographic order by (x, y) via two stable sorts
    by_y = np.argsort(y, kind="mergesort")
    order = by_y[np.argsort(x[by_y], kind="mergesort")]
    xs = x[order]
    ys = y[order].copy()

    x_ties = 0
    joint_ties = 0
    i = 0
    while i < n:
        j = i + 1
        while j < n and xs[j] == xs[i]:
            j += 1
        t = j - i
        x_ties += t * (t - 1) // 2
        k = i
        while k < j:
            m = k + 1
            while m < j and ys[m] == ys[k]:
                m += 1
            u = m - k
            joint_ties += u * (u - 1) // 2
            k = m
        i = j

    discordant = _inversions(ys, np.empty_like(ys))
    y_ties = _tie_pairs(ys)
    total = n * (n - 1) // 2
    concordant = total - x_ties - y_ties + joint_ties - discordant
    return concordant, discordant


def kendall_tau_fast(x, y) -> float:
    """Kendall's tau in O(n log n); equal to :func:`kendall_tau_naive` on all inputs."""
    x, y = _check_pair(x, y, min_dim=2)
    concordant, discordant = _concordance_counts(x, y)
    return (int(concordant) - int(discordant)) / pair_count(x.shape[0])


@numba.njit(cache=True, nogil=True)
def _kendall_block(X, Y, out):
    # same counts as _concordance_counts per cell, but each row of X is sorted once
    n = X.shape[1]
    total = n * (n - 1) // 2
    y_ties = np.empty(Y.shape[0], dtype=np.int64)
    for j in range(Y.shape[0]):
        y_ties[j] = _tie_pairs(np.sort(Y[j]))
    ys = np.empty(n)
    buf = np.empty(n)
    for i in range(X.shape[0]):
        order = np.argsort(X[i], kind="mergesort")
        xs = X[i][order]
        x_ties = _tie_pairs(xs)
        for j in range(Y.shape[0]):
            y = Y[j]
            for k in range(n):
                ys[k] = y[order[k]]
            joint = 0
            if x_ties > 0:
                # order by y inside each run of tied x, as the lexicographic sort would
                s = 0
                while s < n:
                    e = s + 1
                    while e < n and xs[e] == xs[s]:
                        e += 1
                    if e - s > 1:
                        ys[s:e] = np.sort(ys[s:e])
                        joint += _tie_pairs(ys[s:e])
                    s = e
            d = _inversions(ys, buf)
            out[i, j] = total - x_ties - y_ties[j] + joint - 2 * d


# -- smooth Kendall ------------------------------------------------------


def _pairwise_tanh(v: np.ndarray, alpha: float) -> np.ndarray:
    # np.tanh saturates cleanly; the exp(a)-exp(-a) quotient would overflow
    return np.tanh(alpha * (v[..., :, None] - v[..., None, :]))


def smooth_kendall(x, y, alpha: float) -> float:
    """Differentiable Kendall: mean over channel pairs of tanh(a dx) * tanh(a dy)."""
    x, y = _check_pair(x, y, min_dim=2)
    alpha = _check_alpha(alpha)
    n = x.shape[0]
    iu, ju = np.triu_indices(n, 1)
    tx = np.tanh(alpha * (x[iu] - x[ju]))
    ty = np.tanh(alpha * (y[iu] - y[ju]))
    return float(np.sum(tx * ty) / pair_count(n))


def smooth_kendall_grad(x, y, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of :func:`smooth_kendall` with respect to ``x`` and ``y``."""
    x, y = _check_pair(x, y, min_dim=2)
    alpha = _check_alpha(alpha)
    n0 = pair_count(x.shape[0])
    tx = _pairwise_tanh(x, alpha)
    ty = _pairwise_tanh(y, alpha)
    grad_x = (alpha / n0) * np.sum((1.0 - tx * tx) * ty, axis=1)
    grad_y = (alpha / n0) * np.sum((1.0 - ty * ty) * tx, axis=1)
    return grad_x, grad_y


# -- sampled Kendall -----------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _unrank_pairs(k):
    # linear index k = i(i-1)/2 + j  <->  (i, j), 0 <= j < i
    out = np.empty((k.shape[0], 2), dtype=np.int64)
    for r in range(k.shape[0]):
        kr = k[r]
        i = np.int64((1.0 + np.sqrt(1.0 + 8.0 * kr)) // 2)
        while i * (i - 1) // 2 > kr:
            i -= 1
        while (i + 1) * i // 2 <= kr:
            i += 1
        out[r, 0] = i
        out[r, 1] = kr - i * (i - 1) // 2
    return out


def sample_pairs(n: int, m: int, seed: SeedLike) -> np.ndarray:
    """Draw ``m`` distinct channel pairs uniformly from the n(n-1)/2 available.

    Returns an ``(m, 2)`` int64 array of ``(i, j)`` with ``0 <= j < i < n``.
    """
    n = int(n)
    m = int(m)
    if n < 2:
        raise ValueError(f"need n >= 2 channels, got {n}")
    total = pair_count(n)
    if not 1 <= m <= total:
        raise ValueError(f"pair budget {m} outside [1, {total}] for n={n}")
    rng = rng_for(seed)
    k = rng.choice(total, size=m, replace=False).astype(np.int64)
    return _unrank_pairs(k)


def _check_pairs(pairs, n: int) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.size == 0:
        raise ValueError("empty pair list")
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError(f"pairs must have shape (m, 2), got {pairs.shape}")
    if pairs.min() < 0 or pairs.max() >= n:
        raise ValueError(f"pair index out of range for dimension {n}")
    return pairs


def sampled_kendall(x, y, pairs) -> float:
    """Kendall estimate over the supplied channel pairs: (C - D) / m."""
    x, y = _check_pair(x, y, min_dim=2)
    pairs = _check_pairs(pairs, x.shape[0])
    return int(_sampled_score(x, y, pairs)) / pairs.shape[0]


@numba.njit(cache=True, nogil=True)
def _sampled_score(x, y, pairs):
    """Concordant minus discordant count over the listed pairs."""
    score = 0
    for r in range(pairs.shape[0]):
        i = pairs[r, 0]
        j = pairs[r, 1]
        dx = x[i] - x[j]
        dy = y[i] - y[j]
        if (dx > 0 and dy > 0) or (dx < 0 and dy < 0):
            score += 1
        elif (dx > 0 and dy < 0) or (dx < 0 and dy > 0):
            score -= 1
    return score


# -- dispatch --------------------------------------------------------------


def _stream_key(spec: MetricSpec, stream: Union[int, Sequence[int]]) -> list[int]:
    return seed_key(spec.sampler_seed, *seed_key(stream))


def similarity(spec: MetricSpec, x, y, *, stream: Union[int, Sequence[int]] = 0,
               pairs=None) -> float:
    """Evaluate the kernel named by ``spec``.

    For sampled Kendall, the pair list is drawn from ``(sampler_seed, stream)``
    unless an explicit ``pairs`` array is given (frozen per-episode pairs).
    """
    kind = spec.kind
    if kind is MetricKind.COSINE:
        return cosine_similarity(x, y)
    if kind is MetricKind.NEG_EUCLIDEAN:
        return neg_euclidean(x, y)
    if kind is MetricKind.KENDALL_EXACT:
        return kendall_tau_fast(x, y)
    if kind is MetricKind.KENDALL_SMOOTH:
        return smooth_kendall(x, y, spec.alpha)
    if kind is MetricKind.KENDALL_SAMPLED:
        if pairs is None:
            n = np.asarray(x).shape[-1]
            if n >= 2 and spec.pair_budget == pair_count(n):
                return kendall_tau_fast(x, y)  # the complete pair set, in whatever order
            pairs = sample_pairs(n, spec.pair_budget, _stream_key(spec, stream))
        return sampled_kendall(x, y, pairs)
    raise ValueError(f"unsupported metric {kind!r}")


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def similarity_matrix(spec: MetricSpec, X, Y, *, stream: Union[int, Sequence[int]] = (),
                      pairs=None) -> np.ndarray:
    """``S[a, b] = similarity(spec, X[a], Y[b])`` for row-stacked vectors.

    Sampled Kendall without explicit ``pairs`` uses the per-call stream
    ``(*stream, a, b)``, identical to calling :func:`similarity` cell by cell.
    A budget covering every pair skips the draw: any ordering of the complete
    set gives the exact coefficient.
    """
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    n = X.shape[1]
    kind = spec.kind
    if kind is MetricKind.COSINE:
        X, Y = _unit_scale(X), _unit_scale(Y)
        nx = np.linalg.norm(X, axis=1)
        ny = np.linalg.norm(Y, axis=1)
        return np.clip((X @ Y.T) / np.outer(nx, ny), -1.0, 1.0)
    if kind is MetricKind.NEG_EUCLIDEAN:
        diff = X[:, None, :] - Y[None, :, :]
        return -np.sqrt(np.einsum("abk,abk->ab", diff, diff))
    if n < 2:
        raise ValueError(f"need at least 2 channels, got {n}")
    if kind is MetricKind.KENDALL_EXACT or (kind is MetricKind.KENDALL_SAMPLED and pairs is None
                                            and spec.pair_budget == pair_count(n)):
        counts = np.empty((X.shape[0], Y.shape[0]), dtype=np.int64)
        _kendall_block(X, Y, counts)
        return counts / pair_count(n)
    if kind is MetricKind.KENDALL_SMOOTH:
        alpha = _check_alpha(spec.alpha)
        tx = _pairwise_tanh(X, alpha)
        ty = _pairwise_tanh(Y, alpha)
        return np.einsum("aij,bij->ab", tx, ty) / (2.0 * pair_count(n))
    if kind is MetricKind.KENDALL_SAMPLED:
        out = np.empty((X.shape[0], Y.shape[0]))
        prefix = seed_key(stream)
        fixed = None if pairs is None else _check_pairs(pairs, n)
        for a in range(X.shape[0]):
            for b in range(Y.shape[0]):
                p = fixed
                if p is None:
                    p = sample_pairs(n, spec.pair_budget, _stream_key(spec, (*prefix, a, b)))
                out[a, b] = int(_sampled_score(X[a], Y[b], p)) / p.shape[0]
        return out
    raise ValueError(f"unsupported metric {kind!r}")
