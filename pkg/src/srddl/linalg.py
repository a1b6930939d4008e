"""Dense matrix kernels shared by every other module.

Factorizations are delegated to LAPACK through numpy; this module adds the
input contracts and a deterministic sign convention so that repeated runs
produce identical factors.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation, NumericalFailure

__all__ = ["SvdResult", "svd", "sym_eig", "weighted_frob_sq", "check_symmetric"]


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self):
        return (self.u * self.s) @ self.vt


def _finite(m, name="matrix"):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def _sign_flips(vectors):
    """+1/-1 per column so the first non-negligible entry becomes nonnegative."""
    absv = np.abs(vectors)
    scale = absv.max(axis=0, keepdims=True)
    significant = absv > 1e-12 * np.where(scale > 0, scale, 1.0)
    first = np.argmax(significant, axis=0)
    lead = vectors[first, np.arange(vectors.shape[1])]
    return np.where(lead < 0, -1.0, 1.0)


def check_symmetric(m, tol=1e-8, name="matrix"):
    """Raise ContractViolation unless ``m`` is square and symmetric within ``tol``.

    The tolerance is absolute for matrices with entries of order one and
    scales with the largest entry otherwise.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractViolation(f"{name} must be square, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > tol * scale:
        raise ContractViolation(f"{name} is not symmetric (max |m - m^T| = {asym:.3g})")
    return m


def svd(m):
    """Thin SVD ``m = u @ diag(s) @ vt`` with descending ``s``.

    Each left singular vector has its first significant entry made
    nonnegative; the matching right vector is flipped with it.
    """
    m = _finite(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    flips = _sign_flips(u)
    return SvdResult(u * flips, s, vt * flips[:, None])


def sym_eig(m):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Returns
    -------
    values : ndarray of shape (n,)
    vectors : ndarray of shape (n, n)
        Orthonormal eigenvectors in columns, sign-normalized.
    """
    m = check_symmetric(_finite(m))
    sym = 0.5 * (m + m.T)
    try:
        values, vectors = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigendecomposition did not converge: {exc}") from exc
    order = np.argsort(values)[::-1]
    values, vectors = values[order], vectors[:, order]
    return values, vectors * _sign_flips(vectors)


def weighted_frob_sq(r, l):
    """Weighted squared Frobenius norm ``Tr(R^T L R)``.

    For a symmetric residual this is ``Tr(R L R)``; with ``L = I`` it is the
    plain squared Frobenius norm. ``R`` may carry leading batch dimensions,
    in which case one value per matrix is returned.
    """
    r = np.asarray(r, dtype=float)
    l = np.asarray(l, dtype=float)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise ValueError(f"weight must be square, got shape {l.shape}")
    if r.shape[-2] != l.shape[0]:
        raise ValueError(f"residual rows {r.shape[-2]} do not match weight size {l.shape[0]}")
    return np.sum(r * (l @ r), axis=(-2, -1))
