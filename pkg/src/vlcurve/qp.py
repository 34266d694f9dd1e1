"""Primal active-set solver for small convex QPs with sign constraints.

Solves ``min 0.5 z'Qz - c'z`` subject to ``z[k] >= 0`` for every ``k`` in a
given mask, with ``Q`` positive definite.  Starting from ``z = 0`` on the
constrained coordinates (or any nonnegative warm start) is feasible, so no
phase-one is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class QPError(RuntimeError):
    pass


@dataclass
class QPResult:
    z: np.ndarray
    multipliers: np.ndarray   # gradient Qz - c; nonnegative on active constraints at optimum
    active: np.ndarray        # boolean mask of constraints held at zero
    iterations: int


def _solve_subproblem(Q, c, free):
    z = np.zeros_like(c)
    if free.any():
        z[free] = cho_solve(cho_factor(Q[np.ix_(free, free)]), c[free])
    return z


def nonneg_qp(Q, c, constrained, tol: float = 1e-12, max_iter: int | None = None, z0=None) -> QPResult:
    """``z0`` is an optional feasible warm start; its zero coordinates seed the working set."""
    Q = np.asarray(Q, dtype=float)
    c = np.asarray(c, dtype=float)
    constrained = np.asarray(constrained, dtype=bool)
    n = c.size
    if max_iter is None:
        max_iter = 50 * (n + 1) ** 2
    scale = max(1.0, np.abs(c).max(initial=0.0), np.abs(Q).max(initial=0.0))
    if z0 is None:
        active = constrained.copy()
        z = _solve_subproblem(Q, c, ~active)
    else:
        z = np.where(constrained, np.maximum(np.asarray(z0, dtype=float), 0.0), z0)
        active = constrained & (z <= 0)
    for it in range(1, max_iter + 1):
        target = _solve_subproblem(Q, c, ~active)
        movable = constrained & ~active
        infeasible = movable & (target < 0)
        if not infeasible.any():
            z = target
            grad = Q @ z - c
            lam = np.where(active, grad, np.inf)
            k = int(np.argmin(lam))
            if not active.any() or lam[k] >= -tol * scale:
                z[active] = 0.0
                return QPResult(z, grad, active, it)
            active[k] = False
            continue
        # step toward the subproblem minimizer until the first constraint blocks
        ks = np.flatnonzero(infeasible)
        ratios = z[ks] / (z[ks] - target[ks])
        j = int(np.argmin(ratios))
        alpha = float(np.clip(ratios[j], 0.0, 1.0))
        z = z + alpha * (target - z)
        block = ks[j]
        z[block] = 0.0
        active[block] = True
        # coordinates pushed to (numerically) zero join the working set as well
        tiny = movable & (z <= 0)
        z[tiny] = 0.0
        active |= tiny
    raise QPError(f"active-set QP did not terminate in {max_iter} iterations")
