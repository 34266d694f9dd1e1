"""Multivariate normal building blocks for a single subject and origin.

These are the readable per-record versions.  The E-step evaluates the same
quantities batched over gap patterns; the tests hold the two paths together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from .model import NotPositiveDefiniteError, SubjectRecord

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class SubModel:
    mean: np.ndarray
    cov: np.ndarray
    origin: int
    index_map: np.ndarray  # 1-based days


@dataclass(frozen=True)
class ConditionalLaw:
    mean_unobs: np.ndarray
    cov_unobs: np.ndarray
    obs_index: np.ndarray    # 0-based positions in the full vector
    unobs_index: np.ndarray

    @property
    def permutation(self) -> np.ndarray:
        """Position in the full vector of each entry of ``[obs, unobs]``."""
        return np.concatenate([self.obs_index, self.unobs_index])


def record_days(record: SubjectRecord, origin: int) -> np.ndarray:
    return origin + record.offsets


def extract_submodel(theta, cov, record: SubjectRecord, origin: int) -> SubModel:
    theta = np.asarray(theta, dtype=float)
    cov = np.asarray(cov, dtype=float)
    full_len = theta.size
    d = (full_len + 1) // 2
    if not 1 <= origin <= d:
        raise ValueError(f"origin must be in 1..{d}, got {origin}")
    days = record_days(record, origin)
    if days[-1] > full_len:
        raise IndexError(f"record reaches day {int(days[-1])} beyond trajectory length {full_len}")
    idx = days - 1
    return SubModel(theta[idx].copy(), cov[np.ix_(idx, idx)].copy(), origin, days)


def _cholesky(matrix: np.ndarray) -> np.ndarray:
    try:
        return cholesky(matrix, lower=True)
    except LinAlgError:
        raise NotPositiveDefiniteError(np.linalg.eigvalsh(matrix)[0], matrix) from None


def log_density(sub: SubModel, values) -> float:
    values = np.asarray(values, dtype=float)
    if values.shape != sub.mean.shape:
        raise ValueError(f"expected {sub.mean.size} values, got {values.size}")
    chol = _cholesky(sub.cov)
    z = solve_triangular(chol, values - sub.mean, lower=True)
    return float(-0.5 * (values.size * LOG_2PI + z @ z) - np.log(np.diag(chol)).sum())


def conditional_moments(theta_full, cov_full, sub: SubModel, values) -> ConditionalLaw:
    """Law of the unobserved coordinates given the observed ones (Schur complement)."""
    theta_full = np.asarray(theta_full, dtype=float)
    cov_full = np.asarray(cov_full, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != sub.mean.shape:
        raise ValueError(f"expected {sub.mean.size} values, got {values.size}")
    obs = np.asarray(sub.index_map, dtype=np.int64) - 1
    unobs = np.setdiff1d(np.arange(theta_full.size), obs)
    if obs.size == 0:
        return ConditionalLaw(theta_full[unobs].copy(), cov_full[np.ix_(unobs, unobs)].copy(), obs, unobs)
    s_oo = cov_full[np.ix_(obs, obs)]
    s_ou = cov_full[np.ix_(obs, unobs)]
    factor = (_cholesky(s_oo), True)
    e = theta_full[unobs] + s_ou.T @ cho_solve(factor, values - theta_full[obs])
    v = cov_full[np.ix_(unobs, unobs)] - s_ou.T @ cho_solve(factor, s_ou)
    v = 0.5 * (v + v.T)
    return ConditionalLaw(e, v, obs, unobs)


def assemble_moments(law: ConditionalLaw, sub: SubModel, values) -> tuple[np.ndarray, np.ndarray]:
    """Full-length conditional mean and second-moment matrix E[y y^T | observed]."""
    values = np.asarray(values, dtype=float)
    size = law.obs_index.size + law.unobs_index.size
    stacked = np.concatenate([values, law.mean_unobs])
    second = np.outer(stacked, stacked)
    k = values.size
    second[k:, k:] += law.cov_unobs
    perm = law.permutation
    y_full = np.empty(size)
    y_full[perm] = stacked
    c_full = np.empty((size, size))
    c_full[np.ix_(perm, perm)] = second
    return y_full, c_full


def subject_moments(theta, cov, record: SubjectRecord, origin: int) -> tuple[np.ndarray, np.ndarray]:
    sub = extract_submodel(theta, cov, record, origin)
    law = conditional_moments(theta, cov, sub, record.values)
    return assemble_moments(law, sub, record.values)
