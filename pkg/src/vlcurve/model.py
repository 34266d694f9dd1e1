"""Domain types shared by the estimation, simulation and I/O layers.

Days are 1-based on every external surface.  Internally arrays are 0-based,
so day ``k`` lives at index ``k - 1``.  A model with latest onset day ``d``
carries trajectories of length ``2d - 1``; from day ``d`` onward the mean and
the variance are held constant (the steady-state tail).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

PD_TOL = 1e-10
SIMPLEX_TOL = 1e-12
CT_CEILING = 40.0


class NotPositiveDefiniteError(ValueError):
    """Raised when a covariance matrix fails the positive-definiteness check."""

    def __init__(self, min_eigenvalue: float, matrix: np.ndarray | None = None, what: str = "covariance"):
        self.min_eigenvalue = float(min_eigenvalue)
        self.matrix = matrix
        super().__init__(f"{what} is not positive definite (smallest eigenvalue {self.min_eigenvalue:.3e})")


@dataclass(frozen=True)
class ModelDims:
    d: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d!r}")

    @property
    def full_len(self) -> int:
        return 2 * self.d - 1


def expand_tail(active: Sequence[float], d: int) -> np.ndarray:
    """Extend a length-``d`` vector to length ``2d - 1`` by repeating its last entry."""
    active = np.asarray(active, dtype=float)
    if active.shape != (d,):
        raise ValueError(f"expected {d} active values, got shape {active.shape}")
    return np.concatenate([active, np.full(d - 1, active[-1])])


@dataclass(frozen=True)
class TrajectoryParams:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 1 or theta.size % 2 != 1:
            raise ValueError("theta must be a vector of odd length 2d-1")
        d = (theta.size + 1) // 2
        if not np.all(theta[d - 1:] == theta[d - 1]):
            raise ValueError(f"theta violates the tail convention: entries {d}..{theta.size} must equal theta[{d}]")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_active(cls, active: Sequence[float]) -> "TrajectoryParams":
        active = np.asarray(active, dtype=float)
        return cls(expand_tail(active, active.size))

    @property
    def d(self) -> int:
        return (self.theta.size + 1) // 2


@dataclass(frozen=True)
class OnsetWeights:
    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.ndim != 1 or q.size < 1:
            raise ValueError("q must be a non-empty vector")
        if np.any(q < 0):
            raise ValueError("onset weights must be non-negative")
        if abs(q.sum() - 1.0) > SIMPLEX_TOL * max(1, q.size):
            raise ValueError(f"onset weights must sum to 1 (got {q.sum()!r})")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def d(self) -> int:
        return self.q.size


# -- covariance variants ------------------------------------------------------

@dataclass(frozen=True)
class FullCovariance:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] % 2 != 1:
            raise ValueError("full covariance must be a square matrix of odd size 2d-1")
        if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise ValueError("full covariance must be symmetric")
        d = (m.shape[0] + 1) // 2
        diag = np.diag(m)[d - 1:]
        if not np.allclose(diag, diag[0], rtol=1e-12, atol=0):
            raise ValueError(f"full covariance violates the tail convention on the diagonal from day {d}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class AR1Covariance:
    sigma2: float
    rho: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("AR(1) variance must be positive")
        if not -1 < self.rho < 1:
            raise ValueError("AR(1) correlation must lie in (-1, 1)")


@dataclass(frozen=True)
class LinearCovariance:
    basis: tuple
    beta: np.ndarray
    labels: tuple = field(default=())

    def __post_init__(self):
        basis = tuple(np.array(b, dtype=float) for b in self.basis)
        beta = np.array(self.beta, dtype=float)
        if len(basis) == 0 or beta.shape != (len(basis),):
            raise ValueError("linear covariance needs one coefficient per basis matrix")
        for b in basis:
            if b.shape != basis[0].shape or not np.array_equal(b, b.T):
                raise ValueError("basis matrices must be symmetric and share one shape")
        beta.setflags(write=False)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "labels", tuple(self.labels))


CovarianceSpec = Union[FullCovariance, AR1Covariance, LinearCovariance]


@lru_cache(maxsize=16)
def _lags(size: int) -> np.ndarray:
    return np.abs(np.subtract.outer(np.arange(size), np.arange(size)))


def ar1_correlation(rho: float, size: int) -> np.ndarray:
    return (float(rho) ** np.arange(size))[_lags(size)]


def min_eigenvalue(matrix: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(matrix)[0])


def check_positive_definite(matrix: np.ndarray, what: str = "covariance") -> None:
    lam = min_eigenvalue(matrix)
    if not lam > PD_TOL:
        raise NotPositiveDefiniteError(lam, matrix, what)


def materialize_covariance(spec: CovarianceSpec, dims: ModelDims) -> np.ndarray:
    """Dense ``(2d-1) x (2d-1)`` matrix for a covariance spec, checked positive definite."""
    size = dims.full_len
    if isinstance(spec, FullCovariance):
        out = spec.matrix.copy()
    elif isinstance(spec, AR1Covariance):
        out = spec.sigma2 * ar1_correlation(spec.rho, size)
    elif isinstance(spec, LinearCovariance):
        out = np.tensordot(spec.beta, np.stack(spec.basis), axes=1)
    else:
        raise TypeError(f"unknown covariance spec {type(spec).__name__}")
    if out.shape != (size, size):
        raise ValueError(f"covariance has shape {out.shape}, expected {(size, size)}")
    check_positive_definite(out)
    return out


# -- data ---------------------------------------------------------------------

@dataclass(frozen=True)
class SubjectRecord:
    values: np.ndarray
    gaps: np.ndarray
    subject_id: str | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        gaps = np.array(self.gaps, dtype=np.int64).reshape(-1)
        values.setflags(write=False)
        gaps.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gaps", gaps)

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def offsets(self) -> np.ndarray:
        """Day offsets of each measurement relative to the first."""
        return np.concatenate([[0], np.cumsum(self.gaps)]).astype(np.int64)


@dataclass(frozen=True)
class Dataset:
    records: tuple
    dims: ModelDims

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    @property
    def n_measurements(self) -> int:
        return sum(r.m for r in self.records)

    def all_values(self) -> np.ndarray:
        if not self.records:
            return np.empty(0)
        return np.concatenate([r.values for r in self.records])


@dataclass(frozen=True)
class Diagnostic:
    index: int
    rule: str
    detail: str = ""

    def __str__(self):
        return f"record {self.index}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def record_diagnostics(record: SubjectRecord, d: int, index: int = 0) -> list[Diagnostic]:
    out = []
    if record.m < 1:
        out.append(Diagnostic(index, "no measurements"))
    if record.gaps.size != max(record.m - 1, 0):
        out.append(Diagnostic(index, "gap count mismatch", f"{record.m} values, {record.gaps.size} gaps"))
    if not np.all(np.isfinite(record.values)):
        out.append(Diagnostic(index, "non-finite value"))
    if np.any(record.gaps < 1):
        out.append(Diagnostic(index, "gap < 1", f"gaps={record.gaps.tolist()}"))
    if record.gaps.sum() >= d:
        out.append(Diagnostic(index, "gap sum >= d", f"sum={int(record.gaps.sum())}, d={d}"))
    return out


def validate_dataset(data: Dataset) -> list[Diagnostic]:
    """One diagnostic per violated record rule; empty when every record is admissible."""
    out = []
    for i, rec in enumerate(data.records):
        out.extend(record_diagnostics(rec, data.dims.d, i))
    return out


def ct_transform(ct, ceiling: float = CT_CEILING) -> np.ndarray:
    """Map Ct values to ``ceiling - ct`` so that larger means more virus."""
    ct = np.asarray(ct, dtype=float)
    bad = np.flatnonzero(~(ct <= ceiling))
    if bad.size:
        raise ValueError(f"Ct value above ceiling {ceiling} at index {int(bad[0])}: {ct.reshape(-1)[bad[0]]!r}")
    return ceiling - ct


def ct_inverse(y, ceiling: float = CT_CEILING) -> np.ndarray:
    return ceiling - np.asarray(y, dtype=float)
