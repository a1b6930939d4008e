"""Loadings of unseen subjects by per-window nonnegative quadratic programs.

With the basis fixed, the weighted residual of one window is a convex
quadratic in the loadings::

    minimize 1/2 c^T H c + f^T c   subject to c >= 0

with ``f = -diag(B^T (gamma L + L gamma) B)`` and
``H = 2 (B^T L B) o (B^T B)``. For an orthonormal basis the Hadamard factor
is the identity, so ``H`` is diagonal and windows decouple per component.
"""
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.exceptions import ConvergenceWarning

from .dictionary import CoefficientTrack
from .exceptions import ContractViolation
from .predictor import forward

__all__ = ["QpProblem", "QpResult", "build_qp", "qp_objective", "solve_qp_nonneg",
           "kkt_residual", "infer_loadings", "infer_subject"]


@dataclass(frozen=True)
class QpProblem:
    h: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        f = np.asarray(self.f, dtype=float).reshape(-1)
        if h.shape != (f.size, f.size):
            raise ValueError(f"H has shape {h.shape} but f has length {f.size}")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(f))):
            raise ValueError("QP data must be finite")
        scale = max(1.0, float(np.abs(h).max()) if h.size else 1.0)
        if np.abs(h - h.T).max(initial=0.0) > 1e-10 * scale:
            raise ContractViolation("QP Hessian is not symmetric")
        h = 0.5 * (h + h.T)
        lo = float(np.linalg.eigvalsh(h)[0]) if h.size else 0.0
        if lo < -1e-8 * scale:
            raise ContractViolation(f"QP Hessian is not PSD (smallest eigenvalue {lo:.3g})")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "f", f)

    @property
    def k(self):
        return self.f.size


@dataclass(frozen=True)
class QpResult:
    c: np.ndarray
    objective: float
    kkt: float
    iterations: int
    converged: bool


def build_qp(b, gamma_t, laplacian, full_hessian=False):
    """QP data for one correlation window.

    ``full_hessian=True`` returns ``2 B^T L B`` without the ``B^T B`` Hadamard
    factor; the two agree for ``L = I`` and orthonormal ``B``.
    """
    b = np.asarray(b, dtype=float)
    g = np.asarray(gamma_t, dtype=float)
    lap = np.asarray(laplacian, dtype=float)
    p = b.shape[0]
    if g.shape != (p, p) or lap.shape != (p, p):
        raise ValueError(f"basis rows {p}, window {g.shape}, laplacian {lap.shape}")
    lb = lap @ b
    blb = b.T @ lb
    h = 2.0 * blb if full_hessian else 2.0 * blb * (b.T @ b)
    f = -2.0 * np.einsum("pk,pk->k", b, g @ lb)
    return QpProblem(h, f)


def qp_objective(p, c):
    return float(0.5 * c @ p.h @ c + p.f @ c)


def kkt_residual(p, c):
    """Largest scaled violation of the KKT conditions for ``c >= 0``.

    Primal violations are measured relative to ``max(1, |c|_inf)``, gradient
    violations relative to ``max(1, |f|_inf, |Hc|_inf)`` and
    complementarity relative to the product of both.
    """
    hc = p.h @ c
    g = hc + p.f
    cs = max(1.0, float(np.abs(c).max(initial=0.0)))
    gs = max(1.0, float(np.abs(p.f).max(initial=0.0)), float(np.abs(hc).max(initial=0.0)))
    return float(max(np.max(-c, initial=0.0) / cs, np.max(-g, initial=0.0) / gs,
                     np.max(np.abs(c * g), initial=0.0) / (cs * gs)))


def _free_solve(h, f, free):
    x = np.zeros_like(f)
    if free.any():
        idx = np.flatnonzero(free)
        sol, *_ = np.linalg.lstsq(h[np.ix_(idx, idx)], -f[idx], rcond=None)
        x[idx] = sol
    return x


def _active_set(h, f, c, tol, max_iter):
    """Primal active-set refinement from a feasible start (exact for K small)."""
    c = np.maximum(c, 0.0)
    free = c > 0
    for _ in range(max_iter):
        x = _free_solve(h, f, free)
        if np.all(x[free] > 0):
            c = x
            g = h @ c + f
            g[free] = 0.0
            k = int(np.argmin(g))
            if g[k] >= -tol:
                return c, True
            free[k] = True
            continue
        # move toward x until the first free variable hits zero
        blocking = free & (x <= 0)
        steps = c[blocking] / (c[blocking] - x[blocking])
        alpha = float(np.min(steps))
        c = c + alpha * (x - c)
        hit = np.flatnonzero(blocking)[np.argmin(steps)]
        c[hit] = 0.0
        c = np.maximum(c, 0.0)
        free = c > 0
    return c, False


def solve_qp_nonneg(p, tol=1e-8, max_iter=10000):
    """Minimize ``1/2 c^T H c + f^T c`` over ``c >= 0``.

    Accelerated projected gradient (step 1/L, adaptive restart) produces a
    warm start that an active-set pass then makes exact. Diagonal problems
    are solved in closed form. ``tol`` applies to :func:`kkt_residual`.
    A ConvergenceWarning is emitted when neither stage reaches ``tol``; the
    best iterate is returned either way.
    """
    h, f = p.h, p.f
    k = p.k
    scale = max(1.0, float(np.abs(f).max(initial=0.0)))
    if k == 0:
        return QpResult(np.zeros(0), 0.0, 0.0, 0, True)

    if not np.any(h - np.diag(np.diag(h))):
        d = np.diag(h)
        c = np.where(d > 0, np.maximum(-f / np.where(d > 0, d, 1.0), 0.0), 0.0)
        unbounded = (d <= 0) & (f < 0)
        if unbounded.any():
            raise ContractViolation("QP is unbounded below along a zero-curvature direction")
        return QpResult(c, qp_objective(p, c), kkt_residual(p, c), 0, True)

    lip = float(np.linalg.eigvalsh(h)[-1])
    if lip <= 0:
        raise ContractViolation("QP Hessian is zero")
    step = 1.0 / lip
    c = np.zeros(k)
    y = c.copy()
    t = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        c_new = np.maximum(y - step * (h @ y + f), 0.0)
        if (c_new - c) @ (y - c_new) > 0:   # restart when momentum points uphill
            t = 1.0
            y = c_new
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = c_new + ((t - 1.0) / t_new) * (c_new - c)
            t = t_new
        c = c_new
        if it % 10 == 0 and kkt_residual(p, c) <= tol:
            break

    polished, ok = _active_set(h, f, c, tol * scale, max_iter=4 * k + 10)
    best = c
    if ok and kkt_residual(p, polished) <= max(kkt_residual(p, c), tol):
        best = polished
    kkt = kkt_residual(p, best)
    converged = kkt <= tol
    if not converged:
        warnings.warn(f"QP solver stopped with KKT residual {kkt:.3g} after {it} iterations",
                      ConvergenceWarning, stacklevel=2)
    return QpResult(best, qp_objective(p, best), kkt, it, converged)


def infer_loadings(b, gammas, laplacian, tol=1e-8, full_hessian=False):
    """Nonnegative loadings (T, K) for every window of one subject.

    Windows are independent; with an orthonormal basis the exact Hessian is
    diagonal and all windows are solved at once.
    """
    b = np.asarray(b, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    lap = np.asarray(laplacian, dtype=float)
    if gammas.ndim != 3:
        raise ValueError(f"gammas must be (T, P, P), got {gammas.shape}")
    gram = b.T @ b
    if not full_hessian and np.allclose(gram, np.eye(b.shape[1]), atol=1e-10):
        lb = lap @ b
        diag_h = 2.0 * np.einsum("pk,pk->k", b, lb)
        f = -2.0 * np.einsum("pk,tpq,qk->tk", b, gammas, lb)
        # a column in the Laplacian null space has f = 0 too; take c = 0 there
        live = diag_h > 1e-12 * max(1.0, float(diag_h.max()))
        return np.where(live, np.maximum(-f / np.where(live, diag_h, 1.0), 0.0), 0.0)
    return np.stack([solve_qp_nonneg(build_qp(b, g, lap, full_hessian), tol).c
                     for g in gammas])


def infer_subject(b, params, gammas, laplacian, subject_id="", tol=1e-8):
    """Loadings and forward trace for a subject outside the training set."""
    c = infer_loadings(b, gammas, laplacian, tol)
    track = CoefficientTrack(subject_id, c)
    return track, forward(params, c)
