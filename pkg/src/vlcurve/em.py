"""EM loop, multi-start and warm-start protocols, and model selection over ``d``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .accelerate import pack, squarem_point, unpack
from .estep import PatternIndex, responsibilities
from .model import (
    AR1Covariance,
    Dataset,
    FullCovariance,
    LinearCovariance,
    ModelDims,
    NotPositiveDefiniteError,
    SubjectRecord,
    ar1_correlation,
    min_eigenvalue,
)
from .mstep import (
    AndersonError,
    GammaGrid,
    SufficientStats,
    Unconstrained,
    Unimodal,
    UnimodalGamma,
    basis_project,
    cov_objective,
    fit_gamma_curve,
    heteroskedastic_basis,
    update_cov_ar1,
    update_cov_full,
    update_cov_linear,
    update_mean_gamma,
    update_mean_unconstrained,
    update_mean_unimodal,
    update_weights,
)

logger = logging.getLogger(__name__)

COV_STRUCTURES = ("full", "ar1", "linear")
TIE_TOL = 1e-10
STEP_CAP = 1e4


@dataclass(frozen=True)
class DmaxSweep:
    """Unimodal mean with the peak day chosen by likelihood over ``values`` (default ``1..d``)."""
    values: tuple | None = None


@dataclass(frozen=True)
class FitConfig:
    d: int
    mean_constraint: object = Unconstrained()
    cov_structure: str = "full"
    basis: tuple | None = None          # linear structure only; default heteroskedastic lags 1-2
    basis_labels: tuple | None = None
    max_iter: int = 500
    tol: float = 1e-8
    n_starts: int = 5
    warm_start: bool = True             # gamma mean only
    warm_start_dmax_range: tuple = (2, 3, 4, 5, 6)
    warm_start_tol: float = 1e-6        # unimodal seeding fits only feed starting values
    seed: int = 0
    rho_grid: tuple | None = None
    anderson_max_iter: int = 200
    anderson_tol: float = 1e-8
    accelerate: bool = True             # squared extrapolation with a monotone safeguard

    def __post_init__(self):
        ModelDims(self.d)
        if self.max_iter < 1 or self.n_starts < 1:
            raise ValueError("max_iter and n_starts must be at least 1")
        if not self.tol > 0 or not self.anderson_tol > 0 or not self.warm_start_tol > 0:
            raise ValueError("tolerances must be positive")
        if self.cov_structure not in COV_STRUCTURES:
            raise ValueError(f"cov_structure must be one of {COV_STRUCTURES}")
        if isinstance(self.mean_constraint, Unimodal) and not 1 <= self.mean_constraint.d_max <= self.d:
            raise ValueError(f"d_max must lie in 1..{self.d}")

    def linear_basis(self):
        if self.basis is not None:
            labels = self.basis_labels or tuple(f"B{j + 1}" for j in range(len(self.basis)))
            return [np.asarray(b, dtype=float) for b in self.basis], list(labels)
        lags = tuple(k for k in (1, 2) if k < 2 * self.d - 1)
        return heteroskedastic_basis(self.d, lags)

    def describe(self) -> dict:
        mc = self.mean_constraint
        if isinstance(mc, Unimodal):
            mean = {"kind": "unimodal", "d_max": mc.d_max}
        elif isinstance(mc, DmaxSweep):
            mean = {"kind": "unimodal", "d_max": "sweep", "values": list(mc.values) if mc.values else None}
        elif isinstance(mc, UnimodalGamma):
            g = mc.grid
            mean = {"kind": "gamma", "alpha1": list(g.alpha1), "alpha2": list(g.alpha2), "alpha3": list(g.alpha3),
                    "steps": list(g.steps), "refine": g.refine, "polish": g.polish}
        else:
            mean = {"kind": "unconstrained"}
        out = {
            "d": self.d, "mean_constraint": mean, "cov_structure": self.cov_structure,
            "max_iter": self.max_iter, "tol": self.tol, "n_starts": self.n_starts,
            "warm_start": self.warm_start, "warm_start_dmax_range": list(self.warm_start_dmax_range), "warm_start_tol": self.warm_start_tol,
            "seed": self.seed, "accelerate": self.accelerate, "anderson_max_iter": self.anderson_max_iter, "anderson_tol": self.anderson_tol,
        }
        if self.cov_structure == "linear":
            out["basis_labels"] = self.linear_basis()[1]
        return out


@dataclass
class StartSummary:
    index: int
    label: str
    loglik: float
    converged: bool
    iterations: int
    error: str | None = None


@dataclass
class FitResult:
    theta: np.ndarray
    cov: object
    cov_matrix: np.ndarray
    q: np.ndarray
    loglik: float
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    start_index: int
    em_steps: int = 0
    label: str = ""
    alpha: tuple | None = None
    d_max: int | None = None
    n_records: int = 0
    n_measurements: int = 0
    flags: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    starts: list = field(default_factory=list)
    responsibilities: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.q.size

    @property
    def loglik_per_measurement(self) -> float:
        return self.loglik / self.n_measurements


class FitError(RuntimeError):
    def __init__(self, causes):
        self.causes = list(causes)
        super().__init__("every start failed: " + "; ".join(self.causes))


# -- diagnostics --------------------------------------------------------------

@dataclass(frozen=True)
class IdentifiabilityWarning:
    kind: str
    index: int | tuple
    message: str

    def __str__(self):
        return f"[{self.kind}] {self.message}"


def identifiability_diagnostics(data, d: int, fit: FitResult | None = None, q_floor: float = 1e-6,
                                pair_tol: float = 1e-6) -> list[IdentifiabilityWarning]:
    """Warnings for data designs and fitted values that undermine identification.

    A lag is considered observed when any two measurements of one record are
    that many days apart.
    """
    records = data.records if isinstance(data, Dataset) else data
    seen = set()
    for rec in records:
        off = rec.offsets
        if off.size > 1:
            seen.update(np.abs(np.subtract.outer(off, off))[np.triu_indices(off.size, 1)].tolist())
    out = []
    for lag in range(1, d):
        if lag not in seen:
            out.append(IdentifiabilityWarning(
                "missing-lag", lag, f"no pair of measurements {lag} day(s) apart; lag-{lag} covariances are not identified"))
    if fit is not None:
        for j, qj in enumerate(fit.q, start=1):
            if qj < q_floor:
                out.append(IdentifiabilityWarning(
                    "small-onset-weight", j, f"fitted onset weight q_{j} = {qj:.3g} is below {q_floor:g}"))
        var = np.diag(fit.cov_matrix)
        for a in range(d):
            for b in range(a + 1, d):
                if abs(fit.theta[a] - fit.theta[b]) < pair_tol and abs(var[a] - var[b]) < pair_tol:
                    out.append(IdentifiabilityWarning(
                        "repeated-mean-variance", (a + 1, b + 1),
                        f"days {a + 1} and {b + 1} share mean and variance within {pair_tol:g}"))
    return out


# -- initialization -----------------------------------------------------------

def _start_rng(seed: int, start: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(start)]))


def random_init(data: Dataset, d: int, rng: np.random.Generator):
    """Peaked template with random peak day and height; isotropic covariance; uniform weights."""
    values = data.all_values()
    # quantiles rather than extremes: noise pushes the minimum far below the baseline
    lo, mid, hi = (float(v) for v in np.quantile(values, [0.1, 0.5, 0.95]))
    peak = int(rng.integers(1, d + 1))
    height = float(rng.uniform(mid, hi)) if hi > mid else hi
    width = max(d / 4.0, 1.0)
    k = np.arange(1, d + 1)
    active = lo + (height - lo) * np.exp(-0.5 * ((k - peak) / width) ** 2)
    theta = np.concatenate([active, np.full(d - 1, active[-1])])
    s2 = float(np.var(values)) if values.size > 1 else 1.0
    if not s2 > 0:
        s2 = 1.0
    return theta, s2, np.full(d, 1.0 / d)


def _project_mean(theta, constraint):
    """Euclidean projection of a starting mean onto the constraint set."""
    d = (theta.size + 1) // 2
    eye = np.eye(theta.size)
    stats = SufficientStats(np.asarray(theta, float), np.zeros((theta.size,) * 2), np.full(d, 1.0 / d), 1)
    if isinstance(constraint, Unimodal):
        return update_mean_unimodal(stats, eye, constraint.d_max), None
    if isinstance(constraint, UnimodalGamma):
        return fit_gamma_curve(theta, constraint.grid)
    return update_mean_unconstrained(stats, eye), None


class _CovState:
    """Current covariance iterate in its structured parameterization."""

    def __init__(self, structure, matrix, param, basis=None, labels=None):
        self.structure = structure
        self.matrix = matrix
        self.param = param
        self.basis = basis
        self.labels = labels
        self.repaired = False       # matrix came from a positive-definiteness repair

    @classmethod
    def isotropic(cls, structure, d, s2, basis=None, labels=None):
        L = 2 * d - 1
        eye = s2 * np.eye(L)
        if structure == "full":
            return cls("full", eye, eye)
        if structure == "ar1":
            return cls("ar1", eye, AR1Covariance(s2, 0.0))
        beta = basis_project(basis, eye)
        mat = np.tensordot(beta, np.stack(basis), axes=1)
        if min_eigenvalue(mat) <= 1e-10:
            raise NotPositiveDefiniteError(min_eigenvalue(mat), mat, "initial linear covariance")
        return cls("linear", mat, beta, basis, labels)

    def with_matrix(self, matrix, param):
        return _CovState(self.structure, matrix, param, self.basis, self.labels)

    def spec(self):
        if self.structure == "full":
            return FullCovariance(self.matrix)
        if self.structure == "ar1":
            return self.param
        return LinearCovariance(tuple(self.basis), self.param, tuple(self.labels or ()))


def _objective(moment, n, matrix):
    try:
        return cov_objective(moment, n, matrix)
    except np.linalg.LinAlgError:
        return np.inf


def _guarded(moment, n, old: _CovState, new_matrix, new_param, combine):
    """Accept the proposal if it does not worsen the covariance objective; else backtrack."""
    base = _objective(moment, n, old.matrix)
    thresh = base + 1e-12 * (1.0 + abs(base))
    if _objective(moment, n, new_matrix) <= thresh:
        return old.with_matrix(new_matrix, new_param)
    step = 0.5
    for _ in range(40):
        mat, par = combine(step)
        if _objective(moment, n, mat) <= thresh:
            return old.with_matrix(mat, par)
        step *= 0.5
    return old


# -- single EM run ------------------------------------------------------------

@dataclass
class _Run:
    theta: np.ndarray
    cov: _CovState
    q: np.ndarray
    trace: list
    iterations: int
    converged: bool
    alpha: tuple | None
    flags: list
    resp: np.ndarray
    em_steps: int = 0


def _cov_step(stats: SufficientStats, theta, state: _CovState, config: FitConfig, flags, it):
    moment = stats.moment_matrix(theta)
    n = stats.n
    if state.structure == "full":
        repaired = False
        try:
            mat = update_cov_full(stats, theta)
        except NotPositiveDefiniteError as exc:
            eps = abs(exc.min_eigenvalue) + 1e-8
            logger.debug("iteration %d: covariance not positive definite, adding %.3g I", it, eps)
            mat = stats.moment_matrix(theta) / n
            mat = 0.5 * (mat + mat.T)
            idx = np.arange(stats.d - 1, mat.shape[0])
            mat[idx, idx] = mat[idx, idx].mean()
            mat = mat + eps * np.eye(mat.shape[0])
            flags.append(("repaired", it))
            repaired = True
        old = state.matrix
        new = _guarded(moment, n, state, mat, mat, lambda a: ((1 - a) * old + a * mat,) * 2)
        if new is not state:
            new.repaired = repaired
        return new
    if state.structure == "ar1":
        spec = update_cov_ar1(stats, theta, config.rho_grid, include_rho=state.param.rho)
        mat = spec.sigma2 * ar1_correlation(spec.rho, stats.full_len)
        return _guarded(moment, n, state, mat, spec, lambda a: (state.matrix, state.param))
    spec = update_cov_linear(stats, theta, state.basis, state.param,
                             config.anderson_max_iter, config.anderson_tol)
    stack = np.stack(state.basis)
    old_beta = state.param
    mat = np.tensordot(spec.beta, stack, axes=1)

    def combine(a):
        b = (1 - a) * old_beta + a * spec.beta
        return np.tensordot(b, stack, axes=1), b
    return _guarded(moment, n, state, mat, spec.beta, combine)


def _mean_step(stats, cov, constraint, alpha, theta=None):
    if isinstance(constraint, Unimodal):
        return update_mean_unimodal(stats, cov, constraint.d_max, warm=theta), None
    if isinstance(constraint, UnimodalGamma):
        return update_mean_gamma(stats, cov, constraint.grid, incumbent=alpha)
    return update_mean_unconstrained(stats, cov), None


def run_em(index: PatternIndex, config: FitConfig, constraint, theta, cov: _CovState, q, alpha=None) -> _Run:
    """EM from the given point.

    With ``config.accelerate`` each cycle takes two EM steps, extrapolates from
    them and applies one more EM step at the extrapolated point; the result is
    kept only if its log-likelihood is no lower than after the second step.
    A cycle that lowers the log-likelihood is discarded and the run stops there.
    ``max_iter`` bounds the number of cycles, which is what ``iterations``
    reports; the trace holds one entry per cycle and ``em_steps`` counts every
    accepted application of the EM map.
    """
    theta = np.asarray(theta, dtype=float)
    q = np.asarray(q, dtype=float)
    d = index.d
    e = responsibilities(theta, cov.matrix, q, index)
    trace = [e.loglik]
    flags = []
    converged = False
    evals = 0
    cycles = 0
    step_max = 1.0

    def em_map(x, stats):
        th, cv, _, al = x
        new_theta, new_alpha = _mean_step(stats, cv.matrix, constraint, al, th)
        new_cov = _cov_step(stats, new_theta, cv, config, flags, evals)
        return new_theta, new_cov, update_weights(stats), new_alpha

    x = (theta, cov, q, alpha)
    while cycles < config.max_iter:
        cycles += 1
        evals_before = evals
        x1 = em_map(x, e.stats)
        evals += 1
        e1 = responsibilities(x1[0], x1[1].matrix, x1[2], index)
        nxt, e_next = x1, e1
        if config.accelerate:
            x2 = em_map(x1, e1.stats)
            evals += 1
            e2 = responsibilities(x2[0], x2[1].matrix, x2[2], index)
            nxt, e_next = x2, e2
            p0, p1, p2 = (pack(t, c, w, d) for t, c, w, _ in (x, x1, x2))
            for a, vec in squarem_point(p0, p1, p2, step_max):
                if a == -1.0:
                    got, ep = x2[:3], e2
                else:
                    got = unpack(vec, x2[1], d)
                    if got is None:
                        continue
                    ep = _try_estep(got, index)
                    if ep is None:
                        continue
                xs = em_map((got[0], got[1], got[2], x2[3]), ep.stats)
                es = _try_estep(xs[:3], index)
                # never fall behind the plain second step, or the trace can stall short of a fixed point
                if es is not None and es.loglik >= e2.loglik:
                    evals += 1
                    nxt, e_next = xs, es
                    step_max = min(4.0 * step_max, STEP_CAP) if a <= -step_max + 1e-12 else step_max
                    break
        drop = e.loglik - e_next.loglik
        if drop > 0:
            # exact EM cannot descend; this is round-off, which grows without bound near a singular covariance
            if drop / (1.0 + abs(e.loglik)) < config.tol:
                converged = True
            else:
                flags.append(("non-ascent", cycles))
            cycles, evals = cycles - 1, evals_before
            break
        x, e = nxt, e_next
        trace.append(e.loglik)
        if abs(trace[-1] - trace[-2]) / (1.0 + abs(trace[-1])) < config.tol:
            converged = True
            break
    theta, cov, q, alpha = x
    return _Run(theta, cov, q, trace, cycles, converged, alpha, flags, e.responsibilities, evals)


def _try_estep(point, index):
    theta, cov, q = point[:3]
    try:
        e = responsibilities(theta, cov.matrix, q, index)
    except (NotPositiveDefiniteError, FloatingPointError, np.linalg.LinAlgError):
        return None
    return e if np.isfinite(e.loglik) else None


def _to_result(run: _Run, data: Dataset, start: int, label: str, d_max=None) -> FitResult:
    flags = []
    if getattr(run.cov, "repaired", False):
        flags.append("final covariance required a positive-definiteness repair")
    if any(f[0] == "non-ascent" for f in run.flags):
        flags.append("stopped at the last ascending iterate: log-likelihood decreased through round-off")
    elif not run.converged:
        flags.append("maximum iterations reached before convergence")
    return FitResult(
        theta=run.theta, cov=run.cov.spec(), cov_matrix=run.cov.matrix, q=run.q,
        loglik=run.trace[-1], loglik_trace=np.asarray(run.trace), iterations=run.iterations, em_steps=run.em_steps,
        converged=run.converged, start_index=start, label=label, alpha=run.alpha, d_max=d_max,
        n_records=len(data.records), n_measurements=data.n_measurements, flags=flags,
        responsibilities=run.resp,
    )


def _check_data(data: Dataset, d: int) -> Dataset:
    if data.dims.d != d:
        data = Dataset(data.records, ModelDims(d))
    if len(data.records) == 0:
        raise ValueError("dataset has no records")
    return data


def _run_start(data, index, config, constraint, start, label, init=None):
    d = config.d
    basis, labels = config.linear_basis() if config.cov_structure == "linear" else (None, None)
    if init is None:
        theta0, s2, q0 = random_init(data, d, _start_rng(config.seed, start))
        cov0 = _CovState.isotropic(config.cov_structure, d, s2, basis, labels)
        theta0, alpha0 = _project_mean(theta0, constraint)
    else:
        theta0, cov0, q0, alpha0 = init
    run = run_em(index, config, constraint, theta0, cov0, q0, alpha0)
    d_max = constraint.d_max if isinstance(constraint, Unimodal) else None
    return run, _to_result(run, data, start, label, d_max)


def _pick_best(results: Sequence[FitResult]) -> FitResult:
    best = None
    for r in results:
        if best is None or r.loglik > best.loglik + TIE_TOL:
            best = r
    return best


def _finalize(best: FitResult, data, summaries) -> FitResult:
    best.starts = summaries
    best.diagnostics = identifiability_diagnostics(data, best.d, best)
    return best


def fit(data: Dataset, config: FitConfig) -> FitResult:
    """Multi-start EM under ``config.mean_constraint``; the largest final log-likelihood wins."""
    data = _check_data(data, config.d)
    index = PatternIndex(data)
    constraint = config.mean_constraint
    results, summaries, causes = [], [], []
    for s in range(config.n_starts):
        label = f"start {s}"
        try:
            _, res = _run_start(data, index, config, constraint, s, label)
        except (NotPositiveDefiniteError, AndersonError, FloatingPointError, np.linalg.LinAlgError) as exc:
            causes.append(f"{label}: {exc}")
            summaries.append(StartSummary(s, label, float("nan"), False, 0, str(exc)))
            continue
        results.append(res)
        summaries.append(StartSummary(s, label, res.loglik, res.converged, res.iterations))
    if not results:
        raise FitError(causes)
    return _finalize(_pick_best(results), data, summaries)


def fit_dmax_sweep(data: Dataset, config: FitConfig, values=None) -> FitResult:
    """Unimodal fits for each peak day; the largest log-likelihood wins."""
    values = tuple(values) if values else tuple(range(1, config.d + 1))
    fits = []
    summaries = []
    for k in values:
        r = fit(data, replace(config, mean_constraint=Unimodal(k)))
        fits.append(r)
        summaries.extend(replace(s, label=f"d_max={k} {s.label}") for s in r.starts)
    best = _pick_best(fits)
    best.starts = summaries
    return best


def warm_start_protocol(data: Dataset, config: FitConfig) -> FitResult:
    """Peaked-curve fit seeded from unimodal fits over a range of peak days.

    For every random start, unimodal EM fits at each peak day in
    ``config.warm_start_dmax_range`` are turned into curve-family starting
    points (mean, covariance and weights all carried over); a direct
    curve-family run from the raw random start competes as well.
    """
    constraint = config.mean_constraint
    if not isinstance(constraint, UnimodalGamma):
        constraint = UnimodalGamma()
    data = _check_data(data, config.d)
    index = PatternIndex(data)
    dmax_range = [k for k in config.warm_start_dmax_range if 1 <= k <= config.d] or [config.d]
    results, summaries, causes = [], [], []
    for s in range(config.n_starts):
        try:
            base_run, base = _run_start(data, index, config, constraint, s, f"start {s} direct")
            results.append(base)
            summaries.append(StartSummary(s, base.label, base.loglik, base.converged, base.iterations))
        except (NotPositiveDefiniteError, AndersonError, FloatingPointError, np.linalg.LinAlgError) as exc:
            causes.append(f"start {s} direct: {exc}")
            summaries.append(StartSummary(s, f"start {s} direct", float("nan"), False, 0, str(exc)))
        for k in dmax_range:
            label = f"start {s} warm d_max={k}"
            try:
                uni_run, _ = _run_start(data, index, replace(config, tol=config.warm_start_tol), Unimodal(k), s, label)
                theta_g, alpha = fit_gamma_curve(uni_run.theta, constraint.grid)
                init = (theta_g, uni_run.cov, uni_run.q, alpha)
                _, res = _run_start(data, index, config, constraint, s, label, init)
            except (NotPositiveDefiniteError, AndersonError, FloatingPointError, np.linalg.LinAlgError) as exc:
                causes.append(f"{label}: {exc}")
                summaries.append(StartSummary(s, label, float("nan"), False, 0, str(exc)))
                continue
            res.d_max = k
            results.append(res)
            summaries.append(StartSummary(s, label, res.loglik, res.converged, res.iterations))
    if not results:
        raise FitError(causes)
    return _finalize(_pick_best(results), data, summaries)


def estimate(data: Dataset, config: FitConfig) -> FitResult:
    """Dispatch to the estimation protocol implied by the configuration."""
    mc = config.mean_constraint
    if isinstance(mc, DmaxSweep):
        best = fit_dmax_sweep(data, replace(config, mean_constraint=Unimodal(1)), mc.values)
        return _finalize(best, _check_data(data, config.d), best.starts)
    if isinstance(mc, UnimodalGamma) and config.warm_start:
        return warm_start_protocol(data, config)
    return fit(data, config)


# -- choice of d --------------------------------------------------------------

@dataclass
class SweepEntry:
    d: int
    n_records: int
    n_excluded: int
    n_measurements: int
    loglik: float
    loglik_per_measurement: float
    fit: FitResult


@dataclass
class SweepResult:
    entries: list
    selected_d: int

    @property
    def selected(self) -> FitResult:
        return next(e.fit for e in self.entries if e.d == self.selected_d)


def admissible(records, d: int):
    keep, dropped = [], 0
    for rec in records:
        if rec.gaps.sum() < d and np.all(rec.gaps >= 1):
            keep.append(rec)
        else:
            dropped += 1
    return keep, dropped


def sweep_d(records, base_config: FitConfig, d_values) -> SweepResult:
    """Fit at each ``d`` and select by log-likelihood per measurement.

    Records whose gap sum reaches ``d`` are dropped for that ``d`` only, so the
    datasets differ across ``d``; raw log-likelihoods are reported alongside.
    """
    if isinstance(records, Dataset):
        records = records.records
    entries = []
    for d in d_values:
        keep, dropped = admissible(records, d)
        data = Dataset(keep, ModelDims(d))
        cfg = replace(base_config, d=d)
        if isinstance(cfg.mean_constraint, Unimodal) and cfg.mean_constraint.d_max > d:
            cfg = replace(cfg, mean_constraint=Unimodal(d))
        res = estimate(data, cfg)
        entries.append(SweepEntry(d, len(keep), dropped, data.n_measurements, res.loglik,
                                  res.loglik_per_measurement, res))
    return select_d(entries)


def select_d(entries) -> SweepResult:
    """Largest log-likelihood per measurement wins; ties go to the earlier entry."""
    best = None
    for e in entries:
        if best is None or e.loglik_per_measurement > best.loglik_per_measurement + TIE_TOL:
            best = e
    return SweepResult(list(entries), best.d)
