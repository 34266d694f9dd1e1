"""Maximization step: mean, covariance and onset-weight updates.

Every update here minimizes its part of the expected complete-data negative
log-likelihood given the E-step statistics, holding the other blocks fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import (
    AR1Covariance,
    FullCovariance,
    LinearCovariance,
    NotPositiveDefiniteError,
    check_positive_definite,
    min_eigenvalue,
)
from .qp import nonneg_qp


@dataclass
class SufficientStats:
    s1: np.ndarray     # sum_ij E_ij y_{i|j}
    s2: np.ndarray     # sum_ij E_ij C_{i|j}
    col: np.ndarray    # sum_i E_ij, per origin
    n: int

    @property
    def d(self) -> int:
        return self.col.size

    @property
    def full_len(self) -> int:
        return self.s1.size

    def moment_matrix(self, theta) -> np.ndarray:
        """``sum_ij E_ij Y_{theta,i|j}``: n theta theta' - s1 theta' - theta s1' + s2."""
        theta = np.asarray(theta, dtype=float)
        cross = np.outer(self.s1, theta)
        out = self.n * np.outer(theta, theta) - cross - cross.T + self.s2
        return 0.5 * (out + out.T)


# -- constraint descriptions --------------------------------------------------

@dataclass(frozen=True)
class Unconstrained:
    pass


@dataclass(frozen=True)
class Unimodal:
    d_max: int


@dataclass(frozen=True)
class GammaGrid:
    """Search ranges for the peaked curve ``a1 * k**(a2 - 1) * exp(-k / a3)``."""
    alpha1: tuple = (0.1, 50.0)
    alpha2: tuple = (1.05, 6.0)
    alpha3: tuple = (0.5, 10.0)
    steps: tuple = (40, 40, 40)
    refine: int = 9
    polish: bool = True

    def __post_init__(self):
        for lo, hi in (self.alpha1, self.alpha2, self.alpha3):
            if not 0 < lo <= hi:
                raise ValueError("gamma grid ranges must be positive and ordered")
        if min(self.steps) < 1:
            raise ValueError("gamma grid needs at least one step per parameter")

    def axis(self, which: int) -> np.ndarray:
        lo, hi = (self.alpha1, self.alpha2, self.alpha3)[which]
        k = self.steps[which]
        if which == 0:
            return np.geomspace(lo, hi, k)
        return np.linspace(lo, hi, k)


@dataclass(frozen=True)
class UnimodalGamma:
    grid: GammaGrid = field(default_factory=GammaGrid)


MeanConstraint = Unconstrained | Unimodal | UnimodalGamma


# -- mean updates -------------------------------------------------------------

def tail_map(d: int) -> np.ndarray:
    """``(2d-1) x d`` matrix expanding active days into a full trajectory."""
    A = np.zeros((2 * d - 1, d))
    A[np.arange(2 * d - 1), np.minimum(np.arange(2 * d - 1), d - 1)] = 1.0
    return A


def mean_objective(stats: SufficientStats, cov, theta) -> float:
    """``n theta' S^-1 theta - 2 theta' S^-1 s1``."""
    theta = np.asarray(theta, dtype=float)
    fac = cho_factor(cov)
    return float(stats.n * theta @ cho_solve(fac, theta) - 2 * theta @ cho_solve(fac, stats.s1))


def update_mean_unconstrained(stats: SufficientStats, cov) -> np.ndarray:
    """Weighted average of imputed trajectories, projected onto the flat tail.

    The projection is generalized least squares in the metric of ``cov``,
    which is the exact minimizer of the mean objective under the tail tie.
    """
    if stats.n <= 0:
        raise ValueError("no records")
    d = stats.d
    raw = stats.s1 / stats.n
    A = tail_map(d)
    fac = cho_factor(cov)
    pa = cho_solve(fac, A)
    phi = np.linalg.solve(A.T @ pa, pa.T @ raw)
    return A @ phi


def _unimodal_transform(d: int, d_max: int) -> np.ndarray:
    """Map ``(level, steps...)`` to active days; steps are signed increments."""
    sign = np.where(np.arange(1, d) < d_max, 1.0, -1.0)
    T = np.zeros((d, d))
    T[:, 0] = 1.0
    for k in range(1, d):
        T[k, 1:k + 1] = sign[:k]
    return T


def update_mean_unimodal(stats: SufficientStats, cov, d_max: int, return_qp: bool = False, warm=None):
    """Constrained minimizer of the mean objective; ``warm`` is a previous mean used to seed the QP."""
    d = stats.d
    if not 1 <= d_max <= d:
        raise ValueError(f"d_max must be in 1..{d}")
    AT = tail_map(d) @ _unimodal_transform(d, d_max)
    fac = cho_factor(cov)
    pat = cho_solve(fac, AT)
    Q = stats.n * (AT.T @ pat)
    c = pat.T @ stats.s1
    constrained = np.ones(d, dtype=bool)
    constrained[0] = False
    z0 = None
    if warm is not None:
        z0 = np.linalg.solve(_unimodal_transform(d, d_max), np.asarray(warm, dtype=float)[:d])
    res = nonneg_qp(0.5 * (Q + Q.T), c, constrained, z0=z0)
    theta = AT @ res.z
    theta[d - 1:] = theta[d - 1]
    return (theta, res) if return_qp else theta


@lru_cache(maxsize=32)
def _gamma_shapes(d: int, a2: tuple, a3: tuple) -> np.ndarray:
    k = np.arange(1, d + 1, dtype=float)
    a2 = np.asarray(a2)[:, None, None]
    a3 = np.asarray(a3)[None, :, None]
    shapes = k ** (a2 - 1.0) * np.exp(-k / a3)          # (n2, n3, d) active days only
    return shapes.reshape(-1, d)


def gamma_curve(alpha, d: int) -> np.ndarray:
    a1, a2, a3 = alpha
    k = np.arange(1, d + 1, dtype=float)
    active = a1 * k ** (a2 - 1.0) * np.exp(-k / a3)
    return np.concatenate([active, np.full(d - 1, active[-1])])


def _profile_alpha1(shapes, metric, target, n, lo, hi):
    """Best scale per shape in closed form, clipped to the allowed range.

    ``metric`` and ``target`` live on the active days: the objective of a
    curve ``a1 * shape`` is ``n a1^2 shape'M shape - 2 a1 shape'target``.
    """
    ms = shapes @ metric
    quad = np.einsum("ij,ij->i", ms, shapes)
    lin = shapes @ target
    a1 = np.clip(lin / (n * quad), lo, hi)
    return a1, n * a1 * a1 * quad - 2.0 * a1 * lin


def update_mean_gamma(stats: SufficientStats, cov, grid: GammaGrid, incumbent=None, metric=None):
    """Grid search over the peaked family; returns ``(theta, alpha)``.

    The shape parameters are searched on the grid (plus one local refinement);
    the scale has a closed-form optimum for each shape.  ``metric`` overrides
    the inverse covariance, e.g. for least-squares curve fitting.
    """
    d = stats.d
    if metric is None:
        metric = np.linalg.inv(cov)
        metric = 0.5 * (metric + metric.T)
    T = tail_map(d)
    mt = T.T @ metric
    target = mt @ stats.s1
    metric = mt @ T
    lo, hi = grid.alpha1
    a2_axis, a3_axis = grid.axis(1), grid.axis(2)
    shapes = _gamma_shapes(d, tuple(a2_axis), tuple(a3_axis))
    a1, obj = _profile_alpha1(shapes, metric, target, stats.n, lo, hi)
    best = int(np.argmin(obj))
    i2, i3 = divmod(best, a3_axis.size)
    alpha = (float(a1[best]), float(a2_axis[i2]), float(a3_axis[i3]))
    best_obj = float(obj[best])

    if grid.refine > 1:
        r2 = np.linspace(a2_axis[max(i2 - 1, 0)], a2_axis[min(i2 + 1, a2_axis.size - 1)], grid.refine)
        r3 = np.linspace(a3_axis[max(i3 - 1, 0)], a3_axis[min(i3 + 1, a3_axis.size - 1)], grid.refine)
        fine = _gamma_shapes(d, tuple(r2), tuple(r3))
        fa1, fobj = _profile_alpha1(fine, metric, target, stats.n, lo, hi)
        fb = int(np.argmin(fobj))
        if fobj[fb] < best_obj:
            j2, j3 = divmod(fb, r3.size)
            alpha = (float(fa1[fb]), float(r2[j2]), float(r3[j3]))
            best_obj = float(fobj[fb])

    if incumbent is not None:
        inc = np.asarray(gamma_curve(incumbent, d))[None, :d] / incumbent[0]
        ia1, iobj = _profile_alpha1(inc, metric, target, stats.n, lo, hi)
        if iobj[0] < best_obj:
            alpha = (float(ia1[0]), float(incumbent[1]), float(incumbent[2]))
            best_obj = float(iobj[0])

    if grid.polish:
        alpha = _polish_gamma(alpha, best_obj, metric, target, stats, grid)
    return gamma_curve(alpha, d), alpha


_DIRECTIONS = np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1) if i or j], dtype=float)
_SCALES = 4.0 ** -np.arange(12)


def _polish_gamma(alpha, best_obj, metric, target, stats, grid, rounds: int = 6):
    """Multi-scale stencil search over the two shape parameters from the incumbent.

    EM moves the shape by far less than a grid cell per iteration, so without
    this the iterates stall on the grid.  Each round tries 8 directions at 12
    geometric scales in one batch and moves to the best point.
    """
    d = stats.d
    lo, hi = grid.alpha1
    k = np.arange(1, d + 1, dtype=float)
    bounds = np.array([grid.alpha2, grid.alpha3])
    cell = np.array([(grid.alpha2[1] - grid.alpha2[0]) / max(grid.steps[1] - 1, 1),
                     (grid.alpha3[1] - grid.alpha3[0]) / max(grid.steps[2] - 1, 1)])
    moves = (_SCALES[:, None, None] * _DIRECTIONS[None, :, :]).reshape(-1, 2) * cell
    center = np.array(alpha[1:], dtype=float)
    best = (best_obj, alpha)
    for _ in range(rounds):
        pts = np.clip(center + moves, bounds[:, 0], bounds[:, 1])
        shape = k[None, :] ** (pts[:, :1] - 1.0) * np.exp(-k[None, :] / pts[:, 1:])
        a1, obj = _profile_alpha1(shape, metric, target, stats.n, lo, hi)
        j = int(np.argmin(obj))
        if not obj[j] < best[0]:
            break
        best = (float(obj[j]), (float(a1[j]), float(pts[j, 0]), float(pts[j, 1])))
        center = pts[j]
    return best[1]


def fit_gamma_curve(theta, grid: GammaGrid = GammaGrid()):
    """Least-squares fit of the peaked family to days ``1..d`` of a trajectory."""
    theta = np.asarray(theta, dtype=float)
    d = (theta.size + 1) // 2
    metric = np.zeros((theta.size, theta.size))
    metric[np.arange(d), np.arange(d)] = 1.0
    stats = SufficientStats(theta.copy(), np.outer(theta, theta), np.ones(d) / d, 1)
    return update_mean_gamma(stats, None, grid, metric=metric)


def update_mean_constrained(stats: SufficientStats, cov, constraint, incumbent=None) -> np.ndarray:
    """Mean update under any constraint description; ``incumbent`` is the current gamma ``alpha``."""
    if isinstance(constraint, Unimodal):
        return update_mean_unimodal(stats, cov, constraint.d_max)
    if isinstance(constraint, UnimodalGamma):
        return update_mean_gamma(stats, cov, constraint.grid, incumbent=incumbent)[0]
    if isinstance(constraint, Unconstrained):
        return update_mean_unconstrained(stats, cov)
    raise TypeError(f"unknown mean constraint {type(constraint).__name__}")


# -- covariance updates -------------------------------------------------------

def cov_objective(moment, n, cov) -> float:
    """``n log|S| + tr(S^-1 M)``; the covariance part of twice the expected NLL."""
    fac = cho_factor(cov)
    logdet = 2.0 * np.log(np.diag(fac[0])).sum()
    return float(n * logdet + np.trace(cho_solve(fac, moment)))


def update_cov_full(stats: SufficientStats, theta, enforce_tail: bool = True) -> np.ndarray:
    if stats.n <= 0:
        raise ValueError("no records")
    cov = stats.moment_matrix(theta) / stats.n
    cov = 0.5 * (cov + cov.T)
    if enforce_tail:
        d = stats.d
        idx = np.arange(d - 1, cov.shape[0])
        cov[idx, idx] = cov[idx, idx].mean()
    check_positive_definite(cov)
    return cov


RHO_BOUND = 0.999
DEFAULT_RHO_GRID = np.round(np.arange(-99, 100) / 100.0, 2)


def _ar1_profile(moment, n, rho):
    """Profiled objective and variance for each correlation in ``rho``."""
    L = moment.shape[0]
    rho = np.asarray(rho, dtype=float)
    diag = np.diag(moment)
    total = diag.sum()
    inner = diag[1:-1].sum()
    off = np.diag(moment, 1).sum()
    one_m = 1.0 - rho * rho
    tr = (total + rho * rho * inner - 2.0 * rho * off) / one_m
    sigma2 = tr / (L * n)
    logdet_r = (L - 1) * np.log(one_m)
    obj = L * n * np.log(sigma2) + n * logdet_r + tr / sigma2
    return obj, sigma2


def _ar1_stationary(moment) -> np.ndarray:
    """Real roots in the open interval of the derivative of the profiled objective."""
    L = moment.shape[0]
    diag = np.diag(moment)
    total, inner, off = diag.sum(), diag[1:-1].sum(), np.diag(moment, 1).sum()
    roots = np.roots([inner * (1.0 - L), off * (L - 2.0), L * inner + total, -L * off])
    roots = roots[np.abs(roots.imag) < 1e-9].real
    return roots[np.abs(roots) < RHO_BOUND]


def ar1_objective(stats: SufficientStats, theta, sigma2, rho) -> float:
    return cov_objective(stats.moment_matrix(theta), stats.n,
                         sigma2 * (rho ** np.abs(np.subtract.outer(np.arange(stats.full_len),
                                                                   np.arange(stats.full_len)))))


def update_cov_ar1(stats: SufficientStats, theta, rho_grid=None, include_rho=None,
                   refine: bool = True) -> AR1Covariance:
    """Line search over correlation; the variance has a closed form for each.

    ``include_rho`` adds a point (typically the current value) to the grid.
    """
    moment = stats.moment_matrix(theta)
    if stats.full_len == 1:
        return AR1Covariance(float(moment[0, 0] / stats.n), 0.0)
    grid = DEFAULT_RHO_GRID if rho_grid is None else np.asarray(rho_grid, dtype=float)
    if include_rho is not None:
        grid = np.append(grid, include_rho)
    obj, sigma2 = _ar1_profile(moment, stats.n, grid)
    k = int(np.argmin(obj))
    best_rho, best_obj, best_s2 = float(grid[k]), float(obj[k]), float(sigma2[k])
    if refine:
        # EM moves rho by less than a grid step per iteration from a poor start,
        # so also try the exact stationary points of the profile (roots of a cubic)
        roots = _ar1_stationary(moment)
        if roots.size:
            o, s2 = _ar1_profile(moment, stats.n, roots)
            j = int(np.argmin(o))
            if o[j] < best_obj:
                best_rho, best_s2 = float(roots[j]), float(s2[j])
    return AR1Covariance(best_s2, best_rho)


def basis_project(basis, target) -> np.ndarray:
    """Least-squares coefficients of ``target`` in the span of ``basis`` (Frobenius)."""
    X = np.stack([b.ravel() for b in basis], axis=1)
    return np.linalg.lstsq(X, np.asarray(target).ravel(), rcond=None)[0]


def initial_beta(stats: SufficientStats, theta, basis) -> np.ndarray:
    Y = stats.moment_matrix(theta) / stats.n
    for target in (np.diag(np.diag(Y)), np.trace(Y) / Y.shape[0] * np.eye(Y.shape[0])):
        beta = basis_project(basis, target)
        if min_eigenvalue(np.tensordot(beta, np.stack(basis), axes=1)) > 1e-10:
            return beta
    raise NotPositiveDefiniteError(np.nan, None, "initial linear covariance")


class AndersonError(RuntimeError):
    pass


def update_cov_linear(stats: SufficientStats, theta, basis, beta_init=None,
                      max_iter: int = 200, tol: float = 1e-8) -> LinearCovariance:
    """Fixed-point iteration for a covariance linear in known symmetric matrices.

    Each step solves ``G beta = g`` with ``G_ab = tr(S^-1 B_a S^-1 B_b)`` and
    ``g_a = tr(S^-1 B_a S^-1 Y)`` at the current ``S``; the fixed point is a
    stationary point of ``log|S| + tr(S^-1 Y)`` over the span.
    """
    basis = [np.asarray(b, dtype=float) for b in basis]
    stack = np.stack(basis)
    Y = stats.moment_matrix(theta) / stats.n
    beta = initial_beta(stats, theta, basis) if beta_init is None else np.asarray(beta_init, dtype=float)
    cov = np.tensordot(beta, stack, axes=1)
    if min_eigenvalue(cov) <= 1e-10:
        raise NotPositiveDefiniteError(min_eigenvalue(cov), cov, "initial linear covariance")
    for _ in range(max_iter):
        prec = np.linalg.inv(cov)
        pb = prec @ stack
        flat = pb.reshape(len(basis), -1)
        G = flat @ np.swapaxes(pb, 1, 2).reshape(len(basis), -1).T
        g = flat @ (prec @ Y).T.reshape(-1)
        try:
            new = np.linalg.solve(G, g)
        except np.linalg.LinAlgError:
            raise AndersonError("singular system in linear covariance update") from None
        new_cov = np.tensordot(new, stack, axes=1)
        if min_eigenvalue(new_cov) <= 1e-10:
            break
        step = np.abs(new - beta).max()
        beta, cov = new, new_cov
        if step < tol * max(1.0, np.abs(beta).max()):
            break
    return LinearCovariance(tuple(basis), beta)


def update_weights(stats: SufficientStats) -> np.ndarray:
    if stats.n <= 0:
        raise ValueError("no records")
    q = np.clip(stats.col, 0.0, None)
    return q / q.sum()


def expected_complete_nll(stats: SufficientStats, theta, cov, q) -> float:
    """Expected complete-data negative log-likelihood without constants."""
    with np.errstate(divide="ignore"):
        logq = np.log(np.asarray(q, dtype=float))
    weight_term = -float(np.sum(np.where(stats.col > 0, stats.col * logq, 0.0)))
    return 0.5 * cov_objective(stats.moment_matrix(theta), stats.n, cov) + weight_term


# -- structured bases ---------------------------------------------------------

def heteroskedastic_basis(d: int, lags=(1, 2)):
    """Per-day variances (tail tied from day ``d``) plus one shared value per lag band."""
    L = 2 * d - 1
    basis, labels = [], []
    for j in range(d):
        b = np.zeros((L, L))
        if j < d - 1:
            b[j, j] = 1.0
        else:
            idx = np.arange(d - 1, L)
            b[idx, idx] = 1.0
        basis.append(b)
        labels.append(f"diag {j + 1}")
    for k in lags:
        if not 1 <= k < L:
            raise ValueError(f"band lag {k} outside 1..{L - 1}")
        basis.append(np.eye(L, k=k) + np.eye(L, k=-k))
        labels.append(f"band {k}")
    return basis, labels


def elementary_symmetric_basis(size: int):
    basis = []
    for i in range(size):
        for j in range(i, size):
            b = np.zeros((size, size))
            b[i, j] = b[j, i] = 1.0
            basis.append(b)
    return basis
