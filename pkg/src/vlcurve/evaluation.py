"""Error metrics and replicate experiments on simulated data."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .em import FitConfig, admissible, estimate
from .model import Dataset, ModelDims
from .simulate import (
    EmpiricalMarginals,
    GapDistribution,
    SyntheticTruth,
    semisynthetic_truth,
    simulate_semisynthetic,
    simulate_synthetic,
)

PARAMETERS = ("theta", "cov", "q")


def nmse(estimate, truth) -> float:
    """Squared-norm error relative to the squared norm of ``truth`` (Frobenius for matrices)."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch: estimate {est.shape} vs truth {tru.shape}")
    denom = float(np.sum(tru * tru))
    if denom == 0.0:
        raise ValueError("truth has zero norm")
    return float(np.sum((est - tru) ** 2)) / denom


@dataclass
class Scenario:
    """Ground truth plus a sampler ``draw(n, seed) -> Dataset``."""
    label: str
    theta: np.ndarray      # full-length mean, days 1..2d-1
    cov: np.ndarray
    q: np.ndarray
    draw: Callable

    @property
    def d(self) -> int:
        return self.q.size


@dataclass(frozen=True)
class _SyntheticDraw:
    truth: SyntheticTruth

    def __call__(self, n, seed):
        return simulate_synthetic(self.truth, n, seed)[0]


@dataclass(frozen=True)
class _SemisyntheticDraw:
    marginals: EmpiricalMarginals
    gap_law: GapDistribution
    subject_noise_sd: float
    extra_noise_sd: float
    q: np.ndarray
    d: int

    def __call__(self, n, seed):
        return simulate_semisynthetic(self.marginals, self.gap_law, n, seed, self.subject_noise_sd,
                                      self.extra_noise_sd, q=self.q, d=self.d)[0]


def synthetic_scenario(truth: SyntheticTruth, label: str = "synthetic") -> Scenario:
    return Scenario(label, truth.theta.theta, truth.cov_matrix(), truth.q.q, _SyntheticDraw(truth))


def semisynthetic_scenario(marginals: EmpiricalMarginals, gap_law: GapDistribution, d: int = 14,
                           subject_noise_sd: float = 1.0, extra_noise_sd: float = 1.0, q=None,
                           label: str = "semisynthetic") -> Scenario:
    theta, cov = semisynthetic_truth(marginals, d, subject_noise_sd, extra_noise_sd)
    if q is None:
        w = np.arange(d, 0, -1, dtype=float)
        q = w / w.sum()
    q = np.asarray(q, dtype=float)
    draw = _SemisyntheticDraw(marginals, gap_law, subject_noise_sd, extra_noise_sd, q, d)
    return Scenario(label, theta, cov, q, draw)


def replicate_seed(seed: int, n: int, replicate: int) -> int:
    """Seed of one replicate; independent of how many sizes or replicates are run."""
    return int(np.random.SeedSequence([int(seed), int(n), int(replicate)]).generate_state(1, np.uint64)[0])


@dataclass
class NmseReport:
    setting: str
    n: int
    replicates: int
    theta: float
    cov: float
    q: float

    def __post_init__(self):
        for name in PARAMETERS:
            if getattr(self, name) < 0:
                raise ValueError("NMSE cannot be negative")


@dataclass
class ReplicateFit:
    n: int
    replicate: int
    seed: int
    theta: np.ndarray
    cov: np.ndarray
    q: np.ndarray
    nmse: dict
    loglik: float
    converged: bool


@dataclass
class ExperimentResult:
    setting: str
    fits: list = field(default_factory=list)

    def reports(self) -> list:
        out = []
        for n in sorted({f.n for f in self.fits}):
            group = [f for f in self.fits if f.n == n]
            means = {p: float(np.mean([f.nmse[p] for f in group])) for p in PARAMETERS}
            out.append(NmseReport(self.setting, n, len(group), **means))
        return out

    def mean_nmse(self, n: int, parameter: str = "theta") -> float:
        return float(np.mean([f.nmse[parameter] for f in self.fits if f.n == n]))

    def nmse_rows(self) -> list:
        """Tidy rows ``(setting, parameter, n, replicate, nmse)``."""
        return [(self.setting, p, f.n, f.replicate, f.nmse[p]) for f in self.fits for p in PARAMETERS]

    def overlay_rows(self, n: int) -> list:
        """Rows ``(day, replicate, theta_hat)`` over the active days of every fit at size ``n``."""
        rows = []
        for f in self.fits:
            if f.n == n:
                d = f.q.size
                rows.extend((k + 1, f.replicate, float(f.theta[k])) for k in range(d))
        return rows


def _score(fit, scenario: Scenario) -> dict:
    d = scenario.d
    return {
        "theta": nmse(fit.theta[:d], scenario.theta[:d]),
        "cov": nmse(fit.cov_matrix, scenario.cov),
        "q": nmse(fit.q, scenario.q),
    }


def _run_tasks(func, tasks, workers: int, progress=None):
    """``[func(*t) for t in tasks]``, optionally in worker processes; order is preserved."""
    if workers <= 1:
        out = []
        for t in tasks:
            out.append(func(*t))
            if progress is not None:
                progress(*t[1:])
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, *t) for t in tasks]
        out = []
        for t, fut in zip(tasks, futures):
            out.append(fut.result())
            if progress is not None:
                progress(*t[1:])
        return out


def _replicate(scenario, n, r, config, seed):
    s = replicate_seed(seed, n, r)
    fit = estimate(scenario.draw(n, s), replace(config, seed=s))
    return ReplicateFit(n, r, s, fit.theta, fit.cov_matrix, fit.q, _score(fit, scenario), fit.loglik, fit.converged)


def replicate_experiment(scenario: Scenario, n_list, replicates: int, fit_config: FitConfig, seed: int = 0,
                         progress: Callable | None = None, workers: int = 1) -> ExperimentResult:
    """Simulate, fit and score ``replicates`` datasets for every size in ``n_list``.

    The fitted ``d`` is the scenario's ``d`` regardless of ``fit_config.d``.
    Results do not depend on ``workers``; with more than one worker the
    scenario's sampler must be picklable.  ``progress`` receives
    ``(n, replicate)``.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    config = replace(fit_config, d=scenario.d)
    tasks = [(scenario, n, r, config, seed) for n in n_list for r in range(replicates)]
    fits = _run_tasks(_replicate, tasks, workers, None if progress is None else lambda n, r, *_: progress(n, r))
    return ExperimentResult(scenario.label, fits)


@dataclass
class BiasReport:
    truth: np.ndarray
    mean_curve: np.ndarray
    deviation: np.ndarray
    std_error: np.ndarray
    replicates: int

    @property
    def max_abs_deviation(self) -> float:
        return float(np.max(np.abs(self.deviation)))

    @property
    def max_standardized(self) -> float:
        """Largest ``|deviation| / std_error`` over days (inf where the spread is zero but bias is not)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(self.deviation) / self.std_error
        z = np.where((self.std_error == 0) & (self.deviation == 0), 0.0, z)
        return float(np.max(z))


def bias_from_curves(curves, truth) -> BiasReport:
    curves = np.asarray(curves, dtype=float)
    truth = np.asarray(truth, dtype=float)
    mean = curves.mean(axis=0)
    se = curves.std(axis=0, ddof=1) / np.sqrt(curves.shape[0]) if curves.shape[0] > 1 \
        else np.full(truth.shape, np.inf)
    return BiasReport(truth, mean, mean - truth, se, curves.shape[0])


def bias_check(scenario: Scenario, n: int, replicates: int, fit_config: FitConfig, seed: int = 0,
               experiment: ExperimentResult | None = None) -> BiasReport:
    """Replicate-mean of the fitted active-day curve against the truth.

    An existing ``experiment`` containing fits at size ``n`` is reused instead of refitting.
    """
    if experiment is None:
        experiment = replicate_experiment(scenario, [n], replicates, fit_config, seed)
    d = scenario.d
    curves = [f.theta[:d] for f in experiment.fits if f.n == n]
    if not curves:
        raise ValueError(f"no fits at n={n}")
    return bias_from_curves(curves, scenario.theta[:d])


@dataclass
class DSensitivityFit:
    d: int
    replicate: int
    theta: np.ndarray       # active days of the fit
    truth: np.ndarray       # truth on the same days
    loglik: float

    @property
    def early_error(self) -> float:
        return float(np.mean(np.abs(self.theta[:5] - self.truth[:5])))

    @property
    def late_error(self) -> float:
        return float(np.mean(np.abs(self.theta[-5:] - self.truth[-5:])))

    @property
    def peak_day(self) -> int:
        return int(np.argmax(self.theta)) + 1


def truth_on_days(theta_full, days: int) -> np.ndarray:
    """Truth on days ``1..days``, extended by its last value past its own horizon."""
    theta_full = np.asarray(theta_full, dtype=float)
    k = np.minimum(np.arange(days), theta_full.size - 1)
    return theta_full[k]


def _sensitivity_fit(scenario, d, r, n, config, seed):
    s = replicate_seed(seed, n, r)
    kept, _ = admissible(scenario.draw(n, s).records, d)
    fit = estimate(Dataset(kept, ModelDims(d)), replace(config, d=d, seed=s))
    return DSensitivityFit(d, r, fit.theta[:d], truth_on_days(scenario.theta, d), fit.loglik)


def d_sensitivity(scenario: Scenario, n: int, replicates: int, d_values, fit_config: FitConfig,
                  seed: int = 0, progress: Callable | None = None, workers: int = 1) -> list:
    """Fit every replicate at each assumed ``d``; records are dropped per ``d`` when inadmissible.

    Replicate ``r`` uses the same dataset for every ``d``.  ``progress``
    receives ``(d, replicate)``.
    """
    tasks = [(scenario, d, r, n, fit_config, seed) for r in range(replicates) for d in d_values]
    return _run_tasks(_sensitivity_fit, tasks, workers,
                      None if progress is None else lambda d, r, *_: progress(d, r))


def d_sensitivity_rows(fits) -> list:
    """Rows ``(d, replicate, day, theta_hat, theta_true)``."""
    return [(f.d, f.replicate, k + 1, float(f.theta[k]), float(f.truth[k])) for f in fits for k in range(f.d)]
