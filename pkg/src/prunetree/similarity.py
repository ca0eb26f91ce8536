"""Gram matrices, the biased empirical HSIC estimator and CKA."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateRepresentation, ValidationError

MIN_ROWS = 4
DEGENERATE_HSIC = 1e-12


@dataclass(frozen=True)
class RepMatrix:
    """m x d representations on a probe set, one row per example."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"representation must be 2-d, got shape {arr.shape}")
        if arr.shape[0] < MIN_ROWS:
            raise ValidationError(f"need m >= {MIN_ROWS} probe rows, got {arr.shape[0]}")
        if not np.isfinite(arr).all():
            raise ValidationError("representation contains non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in self.data:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "RepMatrix":
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        return cls(np.array(rows))


@dataclass(frozen=True)
class LinearCKA:
    pass


@dataclass(frozen=True)
class RbfCKA:
    sigma: float | None = None  # None selects the median heuristic

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValidationError("RBF bandwidth must be positive")


SimilarityMetric = LinearCKA | RbfCKA


@dataclass(frozen=True)
class GramMatrix:
    data: np.ndarray
    kernel_tag: str

    @property
    def m(self) -> int:
        return self.data.shape[0]


def parse_metric(text: str) -> SimilarityMetric:
    """``linear``, ``rbf`` (median heuristic) or ``rbf:<sigma>``."""
    text = text.strip().lower()
    if text == "linear":
        return LinearCKA()
    if text == "rbf":
        return RbfCKA()
    if text.startswith("rbf:"):
        return RbfCKA(float(text[4:]))
    raise ValidationError(f"unknown similarity metric {text!r}")


def metric_name(metric: SimilarityMetric) -> str:
    if isinstance(metric, LinearCKA):
        return "linear"
    return "rbf" if metric.sigma is None else f"rbf:{metric.sigma!r}"


def _as_rep(r) -> RepMatrix:
    return r if isinstance(r, RepMatrix) else RepMatrix(np.asarray(r))


def _sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def median_bandwidth(x: np.ndarray) -> float:
    """Median nonzero pairwise distance; 1.0 when every pair coincides."""
    d = np.sqrt(_sq_dists(x)[np.triu_indices(len(x), k=1)])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def gram(metric: SimilarityMetric, rep) -> GramMatrix:
    x = _as_rep(rep).data
    if isinstance(metric, LinearCKA):
        return GramMatrix(x @ x.T, "linear")
    sigma = metric.sigma if metric.sigma is not None else median_bandwidth(x)
    k = np.exp(-_sq_dists(x) / (2.0 * sigma**2))
    return GramMatrix(k, f"rbf({sigma!r})")


def _center(k: np.ndarray) -> np.ndarray:
    # H K H without forming H
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def hsic(k, l) -> float:
    """tr(K H L H) / (m - 1)^2 with H = I - 11^T/m, for symmetric K and L."""
    k = np.asarray(getattr(k, "data", k), dtype=np.float64)
    l = np.asarray(getattr(l, "data", l), dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape != l.shape:
        raise ValidationError(f"Gram shapes {k.shape} and {l.shape} are incompatible")
    m = k.shape[0]
    if m < 2:
        raise ValidationError("HSIC needs at least two examples")
    # tr(KHLH) = <HKH, L>_F since H is symmetric and idempotent
    return float(np.sum(_center(k) * l) / (m - 1) ** 2)


def cka(r_parent, r_child, metric: SimilarityMetric = LinearCKA()) -> float:
    a, b = _as_rep(r_parent), _as_rep(r_child)
    if a.m != b.m:
        raise ValidationError(f"probe sizes differ: {a.m} vs {b.m}")
    k, l = gram(metric, a), gram(metric, b)
    hkk, hll = hsic(k, k), hsic(l, l)
    if hkk < DEGENERATE_HSIC or hll < DEGENERATE_HSIC:
        raise DegenerateRepresentation(f"self-HSIC too small ({hkk:.3g}, {hll:.3g})")
    value = hsic(k, l) / np.sqrt(hkk * hll)
    return float(min(max(value, 0.0), 1.0))


def cka_or_zero(r_parent, r_child, metric: SimilarityMetric = LinearCKA()) -> float:
    """CKA that scores a collapsed representation as 0 instead of raising."""
    try:
        return cka(r_parent, r_child, metric)
    except DegenerateRepresentation as exc:
        warnings.warn(f"degenerate representation scored as CKA 0: {exc}", RuntimeWarning, stacklevel=2)
        return 0.0
