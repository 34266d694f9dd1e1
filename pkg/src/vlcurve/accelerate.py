"""Squared extrapolation of the EM map.

Parameters are packed into an unconstrained vector (active means, a
covariance parameter vector, log weights).  An extrapolated point only serves
as the location of the next E-step; the following M-step maps it back into the
constraint set, and the caller keeps the result only when the observed
log-likelihood has not decreased.
"""

from __future__ import annotations

import numpy as np

from .model import AR1Covariance, ar1_correlation, expand_tail

LOG_FLOOR = -700.0
RHO_LIMIT = 0.999


def pack(theta, cov, q, d) -> np.ndarray:
    if cov.structure == "ar1":
        p = cov.param
        cpart = np.array([np.log(p.sigma2), np.arctanh(np.clip(p.rho, -RHO_LIMIT, RHO_LIMIT))])
    elif cov.structure == "full":
        cpart = cov.matrix[np.triu_indices(cov.matrix.shape[0])]
    else:
        cpart = np.asarray(cov.param, dtype=float)
    logq = np.log(np.maximum(q, np.exp(LOG_FLOOR)))
    return np.concatenate([np.asarray(theta[:d], dtype=float), cpart, logq - logq.mean()])


def unpack(vec, template, d):
    """Inverse of :func:`pack` against a covariance ``template``; ``None`` if not positive definite."""
    theta = expand_tail(vec[:d], d)
    L = template.matrix.shape[0]
    if template.structure == "ar1":
        ls, z = vec[d], vec[d + 1]
        rho = float(np.clip(np.tanh(z), -RHO_LIMIT, RHO_LIMIT))
        spec = AR1Covariance(float(np.exp(ls)), rho)
        cov = template.with_matrix(spec.sigma2 * ar1_correlation(rho, L), spec)
        rest = vec[d + 2:]
    else:
        if template.structure == "full":
            k = L * (L + 1) // 2
            mat = np.zeros((L, L))
            mat[np.triu_indices(L)] = vec[d:d + k]
            mat = mat + np.triu(mat, 1).T
            param = mat
        else:
            k = len(template.basis)
            param = np.asarray(vec[d:d + k])
            mat = np.tensordot(param, np.stack(template.basis), axes=1)
            mat = 0.5 * (mat + mat.T)
        try:
            np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            return None
        cov = template.with_matrix(mat, param)
        rest = vec[d + k:]
    z = rest - rest.max()
    w = np.exp(np.maximum(z, LOG_FLOOR))
    return theta, cov, w / w.sum()


def squarem_point(p0, p1, p2, step_max):
    """Extrapolation coefficient and candidate vectors, most aggressive first."""
    r = p1 - p0
    v = p2 - p1 - r
    nv = float(np.linalg.norm(v))
    if nv == 0.0 or not np.isfinite(nv):
        return []
    a = min(max(-float(np.linalg.norm(r)) / nv, -step_max), -1.0)
    out = []
    while a < -1.0 - 1e-8 and len(out) < 3:
        out.append((a, p0 - 2.0 * a * r + a * a * v))
        a = 0.5 * (a - 1.0)
    # a = -1 reproduces the second iterate, so its follow-up is a plain EM step
    out.append((-1.0, p2))
    return out
