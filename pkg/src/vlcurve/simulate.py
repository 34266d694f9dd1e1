"""Synthetic and semi-synthetic data generation with known ground truth.

Random streams are derived per block of subjects from the master seed, so a
dataset does not depend on how the blocks are scheduled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import (
    AR1Covariance,
    CovarianceSpec,
    Dataset,
    ModelDims,
    OnsetWeights,
    SubjectRecord,
    TrajectoryParams,
    materialize_covariance,
)
from .mstep import gamma_curve

logger = logging.getLogger(__name__)

BLOCK = 1024


# -- gap laws -----------------------------------------------------------------

@dataclass(frozen=True)
class UniformGaps:
    lo: int
    hi: int

    def __post_init__(self):
        if not 1 <= self.lo <= self.hi:
            raise ValueError("uniform gap range needs 1 <= lo <= hi")

    @property
    def support(self):
        return np.arange(self.lo, self.hi + 1)

    @property
    def probs(self):
        return np.full(self.hi - self.lo + 1, 1.0 / (self.hi - self.lo + 1))

    def describe(self) -> str:
        return f"uniform:{self.lo}:{self.hi}"


@dataclass(frozen=True)
class CategoricalGaps:
    support: tuple
    probs: tuple

    def __post_init__(self):
        s = np.asarray(self.support)
        p = np.asarray(self.probs, dtype=float)
        if s.shape != p.shape or s.size == 0:
            raise ValueError("categorical gap law needs one probability per support point")
        if np.any(s < 1) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("gap support must be positive and probabilities on the simplex")
        object.__setattr__(self, "support", tuple(int(v) for v in s))
        object.__setattr__(self, "probs", tuple(float(v) for v in p / p.sum()))

    def describe(self) -> str:
        return "categorical:" + ",".join(f"{s}={p:.17g}" for s, p in zip(self.support, self.probs))


GapDistribution = UniformGaps | CategoricalGaps


def decreasing_gaps(d: int) -> CategoricalGaps:
    """Gap law with probabilities proportional to ``d - k`` on ``1..d-1``."""
    k = np.arange(1, d)
    w = (d - k).astype(float)
    return CategoricalGaps(tuple(k), tuple(w / w.sum()))


def parse_gap_law(text: str, d: int) -> GapDistribution:
    """``uniform:LO:HI``, ``decreasing`` or ``categorical:1=0.5,2=0.5``."""
    text = text.strip()
    if text == "decreasing":
        return decreasing_gaps(d)
    kind, _, rest = text.partition(":")
    if kind == "uniform":
        lo, hi = (int(v) for v in rest.split(":"))
        return UniformGaps(lo, hi)
    if kind == "categorical":
        pairs = [item.split("=") for item in rest.split(",") if item]
        return CategoricalGaps(tuple(int(k) for k, _ in pairs), tuple(float(p) for _, p in pairs))
    raise ValueError(f"unknown gap law {text!r}")


def _draw_gaps(rng, law: GapDistribution, size: int, m: int, d: int):
    support = np.asarray(law.support)
    probs = np.asarray(law.probs)
    if m == 1:
        return np.zeros((size, 0), dtype=np.int64), 0
    if support.min() * (m - 1) >= d:
        raise ValueError(f"gap law admits no {m - 1} gaps summing below d={d}")
    gaps = rng.choice(support, size=(size, m - 1), p=probs)
    rejected = 0
    bad = gaps.sum(1) >= d
    while bad.any():
        rejected += int(bad.sum())
        gaps[bad] = rng.choice(support, size=(int(bad.sum()), m - 1), p=probs)
        bad = gaps.sum(1) >= d
    return gaps.astype(np.int64), rejected


# -- synthetic ----------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTruth:
    theta: TrajectoryParams
    cov: CovarianceSpec
    q: OnsetWeights
    gap_law: GapDistribution
    m_per_subject: int = 2
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.theta.d != self.q.d:
            raise ValueError("theta and q imply different d")
        materialize_covariance(self.cov, self.dims)
        if self.m_per_subject < 1:
            raise ValueError("m_per_subject must be at least 1")

    @property
    def d(self) -> int:
        return self.q.d

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.q.d)

    def cov_matrix(self) -> np.ndarray:
        return materialize_covariance(self.cov, self.dims)


PRESET_ALPHA = (17.0 * np.exp(2.0) / 16.0, 3.0, 2.0)


def preset_truth(gap_law: GapDistribution | None = None, m_per_subject: int = 2) -> SyntheticTruth:
    """Two-week preset: peaked mean with maximum 17 on day 4, AR(1) noise, decreasing onset weights.

    The peak day is ``(a2 - 1) * a3`` and the peak value ``a1 * 16 * exp(-2)``.
    """
    d = 14
    theta = TrajectoryParams(gamma_curve(PRESET_ALPHA, d))
    w = np.arange(d, 0, -1, dtype=float)
    q = OnsetWeights(w / w.sum())
    law = UniformGaps(1, 14) if gap_law is None else gap_law
    meta = {
        "preset": "paper",
        "alpha": list(PRESET_ALPHA),
        "theta_family": "a1 * k**(a2-1) * exp(-k/a3) for k <= d, constant after d",
        "q": "proportional to d, d-1, ..., 1",
    }
    return SyntheticTruth(theta, AR1Covariance(10.0, 0.9), q, law, m_per_subject, meta)


@dataclass
class OriginLog:
    """Hidden timing of every simulated subject (1-based days)."""
    first_day: np.ndarray
    offsets: list
    rejected_gap_draws: int = 0


def _block_rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), stream, block]))


def simulate_synthetic(truth: SyntheticTruth, n: int, seed: int, m: int | None = None,
                       id_prefix: str = "s", stream: int = 0):
    """Draw ``n`` subjects from the latent-origin model; returns ``(Dataset, OriginLog)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    m = truth.m_per_subject if m is None else m
    d = truth.d
    L = 2 * d - 1
    theta = truth.theta.theta
    chol = np.linalg.cholesky(truth.cov_matrix())
    q = truth.q.q
    records, firsts, offsets = [], [], []
    rejected = 0
    for b, start in enumerate(range(0, n, BLOCK)):
        size = min(BLOCK, n - start)
        rng = _block_rng(seed, b, stream)
        x1 = rng.choice(d, size=size, p=q) + 1
        gaps, rej = _draw_gaps(rng, truth.gap_law, size, m, d)
        rejected += rej
        full = theta + rng.standard_normal((size, L)) @ chol.T
        offs = np.concatenate([np.zeros((size, 1), dtype=np.int64), np.cumsum(gaps, axis=1)], axis=1)
        idx = x1[:, None] - 1 + offs
        vals = np.take_along_axis(full, idx, axis=1)
        for i in range(size):
            records.append(SubjectRecord(vals[i], gaps[i], f"{id_prefix}{start + i + 1}"))
        firsts.append(x1)
        offsets.extend(offs)
    if rejected:
        logger.info("redrew %d gap vectors whose sum reached d=%d", rejected, d)
    return Dataset(records, ModelDims(d)), OriginLog(np.concatenate(firsts), offsets, rejected)


def simulate_multiplicities(truth: SyntheticTruth, counts: dict, seed: int):
    """Concatenate subjects with different numbers of measurements, e.g. ``{2: 6000, 3: 580}``."""
    records, firsts, offsets, rejected = [], [], [], 0
    for stream, (m, count) in enumerate(sorted(counts.items())):
        ds, log = simulate_synthetic(truth, count, seed, m=m, id_prefix=f"m{m}s", stream=stream)
        records.extend(ds.records)
        firsts.append(log.first_day)
        offsets.extend(log.offsets)
        rejected += log.rejected_gap_draws
    return Dataset(records, truth.dims), OriginLog(np.concatenate(firsts), offsets, rejected)


# -- semi-synthetic -----------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalMarginals:
    """Per-day value samples; ``samples[k]`` holds day ``k + 1``."""
    samples: tuple

    def __post_init__(self):
        samples = tuple(np.asarray(s, dtype=float).reshape(-1) for s in self.samples)
        for k, s in enumerate(samples, start=1):
            if s.size == 0:
                raise ValueError(f"empirical marginal for day {k} is empty")
        object.__setattr__(self, "samples", samples)

    @property
    def n_days(self) -> int:
        return len(self.samples)

    def means(self) -> np.ndarray:
        return np.array([s.mean() for s in self.samples])

    def variances(self) -> np.ndarray:
        return np.array([s.var() for s in self.samples])


def semisynthetic_truth(marginals: EmpiricalMarginals, d: int, subject_noise_sd=1.0, extra_noise_sd=1.0):
    """Mean vector and covariance of the latent full vectors over days ``1..2d-1``."""
    L = 2 * d - 1
    if marginals.n_days < L:
        raise ValueError(f"marginals cover {marginals.n_days} days, need {L}")
    theta = marginals.means()[:L]
    cov = np.diag(marginals.variances()[:L]) + subject_noise_sd ** 2 + extra_noise_sd ** 2 * np.eye(L)
    return theta, cov


def simulate_semisynthetic(marginals: EmpiricalMarginals, gap_law: GapDistribution, n: int, seed: int,
                           subject_noise_sd: float = 1.0, extra_noise_sd: float = 1.0,
                           q=None, d: int | None = None, m: int = 2, return_latent: bool = False):
    """Resample per-day values, add shared and per-coordinate noise, then keep ``m`` entries.

    ``q`` is the onset law for the first kept entry; it defaults to the
    decreasing weights of the two-week preset.
    """
    d = (marginals.n_days + 1) // 2 if d is None else d
    L = 2 * d - 1
    if marginals.n_days < L:
        raise ValueError(f"marginals cover {marginals.n_days} days, need {L}")
    if q is None:
        w = np.arange(d, 0, -1, dtype=float)
        q = w / w.sum()
    q = OnsetWeights(q).q
    if q.size != d:
        raise ValueError("onset law length must equal d")
    samples = marginals.samples[:L]
    records, firsts, offsets, latents = [], [], [], []
    rejected = 0
    for b, start in enumerate(range(0, n, BLOCK)):
        size = min(BLOCK, n - start)
        rng = _block_rng(seed, b, 7)
        full = np.empty((size, L))
        for k, s in enumerate(samples):
            full[:, k] = s[rng.integers(0, s.size, size=size)]
        full += subject_noise_sd * rng.standard_normal((size, 1))
        full += extra_noise_sd * rng.standard_normal((size, L))
        x1 = rng.choice(d, size=size, p=q) + 1
        gaps, rej = _draw_gaps(rng, gap_law, size, m, d)
        rejected += rej
        offs = np.concatenate([np.zeros((size, 1), dtype=np.int64), np.cumsum(gaps, axis=1)], axis=1)
        vals = np.take_along_axis(full, x1[:, None] - 1 + offs, axis=1)
        for i in range(size):
            records.append(SubjectRecord(vals[i], gaps[i], f"s{start + i + 1}"))
        firsts.append(x1)
        offsets.extend(offs)
        if return_latent:
            latents.append(full)
    data = Dataset(records, ModelDims(d))
    log = OriginLog(np.concatenate(firsts), offsets, rejected)
    if return_latent:
        return data, log, np.concatenate(latents)
    return data, log


def standin_marginals(per_day: int = 30, n_days: int = 27, seed: int = 20220101) -> EmpiricalMarginals:
    """Small per-day samples around the preset mean with day-dependent spread.

    Stands in for a densely followed cohort; the spread grows with the mean
    so that the resulting data are heteroskedastic.
    """
    rng = np.random.default_rng(seed)
    d = 14
    theta = gamma_curve(PRESET_ALPHA, d)
    theta = np.concatenate([theta, np.full(max(n_days - theta.size, 0), theta[-1])])[:n_days]
    sd = np.sqrt(2.0 + 0.5 * theta)
    return EmpiricalMarginals(tuple(theta[k] + sd[k] * rng.standard_normal(per_day) for k in range(n_days)))
