"""Responsibilities, observed-data log-likelihood and expected sufficient statistics.

Records sharing a gap pattern share every sub-model, so all work is batched
over (pattern, origin) pairs.  For one such pair the imputed full vector is an
affine map ``a + B y`` of the observed values ``y``; the expected sufficient
statistics therefore only need the responsibility-weighted zeroth, first and
second moments of ``y`` within the pattern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import LOG_2PI, subject_moments
from .model import Dataset, NotPositiveDefiniteError, materialize_covariance
from .mstep import SufficientStats

RESP_FLOOR = 1e-12


class _Block:
    """All records with ``m`` measurements, sorted so each gap pattern is a contiguous slice."""

    def __init__(self, positions, values, offsets, d):
        patterns, inverse = np.unique(offsets, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        self.positions = np.asarray(positions, dtype=np.int64)[order]  # record indices in the dataset
        self.values = np.asarray(values, dtype=float)[order]            # (n_m, m)
        self.pattern_of = inverse[order]
        self.patterns = patterns                                        # (G, m) offsets from first day
        self.m = self.values.shape[1]
        bounds = np.searchsorted(self.pattern_of, np.arange(patterns.shape[0] + 1))
        self.slices = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        outer = (self.values[:, :, None] * self.values[:, None, :]).reshape(-1, self.m ** 2)
        # per-record features (1, y, vec(y y')) for pattern-wise moment sums
        self.features = np.concatenate([np.ones((self.values.shape[0], 1)), self.values, outer], axis=1)
        # 0-based full-vector positions for every (pattern, origin): (G, d, m)
        self.index = np.arange(d)[None, :, None] + patterns[:, None, :]
        L = 2 * d - 1
        self.flat_index = self.index.reshape(-1)
        self.pair_index = (self.index[..., :, None] * L + self.index[..., None, :]).reshape(-1)


class PatternIndex:
    """Precomputed grouping of a dataset for repeated E-steps at a fixed ``d``."""

    def __init__(self, data: Dataset):
        self.data = data
        self.d = data.dims.d
        self.full_len = data.dims.full_len
        self.n = len(data.records)
        by_m: dict[int, list[int]] = {}
        for i, rec in enumerate(data.records):
            if rec.gaps.sum() >= self.d or np.any(rec.gaps < 1):
                raise ValueError(f"record {i} is not admissible for d={self.d}")
            by_m.setdefault(rec.m, []).append(i)
        self.blocks = []
        for m in sorted(by_m):
            pos = by_m[m]
            vals = np.array([data.records[i].values for i in pos])
            offs = np.array([data.records[i].offsets for i in pos])
            self.blocks.append(_Block(pos, vals, offs, self.d))

    @classmethod
    def of(cls, data) -> "PatternIndex":
        return data if isinstance(data, PatternIndex) else cls(data)


@dataclass
class EStepOutput:
    responsibilities: np.ndarray
    loglik: float
    stats: SufficientStats | None = None
    moments: dict | None = None


def _dense(cov, full_len):
    if isinstance(cov, np.ndarray):
        return cov
    from .model import ModelDims
    return materialize_covariance(cov, ModelDims((full_len + 1) // 2))


def _block_terms(block: _Block, theta, cov):
    """Per-(pattern, origin) precision pieces and per-record log densities."""
    idx = block.index
    m = block.m
    s_oo = cov[idx[..., :, None], idx[..., None, :]]             # (G, d, m, m)
    try:
        chol = np.linalg.cholesky(s_oo)
    except np.linalg.LinAlgError:
        lam = min(np.linalg.eigvalsh(s_oo.reshape(-1, m, m)).min(), 0.0)
        raise NotPositiveDefiniteError(lam, cov) from None
    chol_inv = np.linalg.inv(chol)
    prec = np.swapaxes(chol_inv, -1, -2) @ chol_inv               # (G, d, m, m)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)  # (G, d)
    mu = theta[idx]                                               # (G, d, m)
    pmu = (prec @ mu[..., None])[..., 0]
    const = m * LOG_2PI + logdet + (pmu * mu).sum(-1)
    # quadratic form expanded as y'Py - 2 y'P mu + mu'P mu, one matmul per pattern
    coef = np.concatenate([-2.0 * pmu, prec.reshape(prec.shape[0], prec.shape[1], m * m)], axis=2)
    logpdf = np.empty((block.values.shape[0], idx.shape[1]))
    feats = block.features[:, 1:]
    for g, sl in enumerate(block.slices):
        logpdf[sl] = feats[sl] @ coef[g].T
    logpdf += const[block.pattern_of]
    logpdf *= -0.5
    return prec, logpdf


def _log_joint(index: PatternIndex, theta, cov, q):
    logq = _safe_log(q)
    logp = np.empty((index.n, index.d))
    cache = []
    for block in index.blocks:
        prec, lp = _block_terms(block, theta, cov)
        logp[block.positions] = lp
        cache.append(prec)
    return logp + logq[None, :], cache


def _safe_log(q):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(q, dtype=float))


def _normalize(log_joint):
    top = log_joint.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        bad = int(np.flatnonzero(~np.isfinite(top[:, 0]))[0])
        raise FloatingPointError(f"record {bad} has zero likelihood under every origin")
    resp = np.exp(log_joint - top)
    total = resp.sum(axis=1, keepdims=True)
    resp /= total
    return resp, float((top + np.log(total)).sum())


def observed_loglik(theta, cov, q, data) -> float:
    """Log of the mixture likelihood summed over records."""
    index = PatternIndex.of(data)
    theta = np.asarray(theta, dtype=float)
    log_joint, _ = _log_joint(index, theta, _dense(cov, index.full_len), q)
    return _normalize(log_joint)[1]


def _accumulate(index: PatternIndex, theta, cov, resp, prec_cache):
    """Expected sums of imputed trajectories and their outer products.

    With ``mu = theta + S[:, I] P (y - theta_I)`` and conditional covariance
    ``S - S[:, I] P S[I, :]`` for observed positions ``I`` and ``P`` the
    inverse of ``S[I, I]``, the sums over records and origins collapse to
    ``h = sum P (w1 - w0 theta_I)`` and ``A = sum P What P - w0 P`` scattered
    into full-length coordinates, where ``What`` is the weighted centred
    second moment of the observed values.
    """
    L = index.full_len
    weights = np.where(resp < RESP_FLOOR, 0.0, resp)
    h = np.zeros(L)
    A = np.zeros(L * L)
    total_w0 = 0.0
    for block, prec in zip(index.blocks, prec_cache):
        w = weights[block.positions]                                # (n_m, d)
        m = block.m
        F = block.features
        W = np.stack([w[sl].T @ F[sl] for sl in block.slices])      # (G, d, 1 + m + m^2)
        w0 = W[..., 0]
        w1 = W[..., 1:1 + m]
        w2 = W[..., 1 + m:].reshape(W.shape[0], W.shape[1], m, m)
        t = theta[block.index]                                      # (G, d, m)
        r = w1 - w0[..., None] * t
        tw = t[..., :, None] * w1[..., None, :]
        centred = w2 - tw - np.swapaxes(tw, -1, -2) + w0[..., None, None] * (t[..., :, None] * t[..., None, :])
        h += np.bincount(block.flat_index, (prec @ r[..., None]).reshape(-1), minlength=L)
        blockA = prec @ centred @ prec - w0[..., None, None] * prec
        A += np.bincount(block.pair_index, blockA.reshape(-1), minlength=L * L)
        total_w0 += w0.sum()
    A = A.reshape(L, L)
    g = cov @ h
    s1 = total_w0 * theta + g
    tg = np.outer(theta, g)
    s2 = total_w0 * (cov + np.outer(theta, theta)) + cov @ A @ cov + tg + tg.T
    s2 = 0.5 * (s2 + s2.T)
    return s1, s2


def responsibilities(theta, cov, q, data, keep_moments: bool = False) -> EStepOutput:
    """E-step at the given parameters.

    ``cov`` may be a covariance spec or a dense matrix.  With ``keep_moments``
    the per-(record, origin) imputed moments are also returned, computed one by
    one; intended for small problems and cross-checks.
    """
    index = PatternIndex.of(data)
    theta = np.asarray(theta, dtype=float)
    q = np.asarray(q, dtype=float)
    cov = _dense(cov, index.full_len)
    log_joint, cache = _log_joint(index, theta, cov, q)
    resp, loglik = _normalize(log_joint)
    s1, s2 = _accumulate(index, theta, cov, resp, cache)
    stats = SufficientStats(s1=s1, s2=s2, col=resp.sum(0), n=index.n)
    moments = None
    if keep_moments:
        moments = {}
        for i, rec in enumerate(index.data.records):
            for j in range(index.d):
                if resp[i, j] >= RESP_FLOOR:
                    moments[(i, j + 1)] = subject_moments(theta, cov, rec, j + 1)
    return EStepOutput(resp, loglik, stats, moments)
