"""Structurally regularized dynamic dictionary learning.

Every subject ``n`` has a stack of correlation matrices ``gammas[n]`` of
shape (T_n, P, P) and a normalized Laplacian ``laplacians[n]`` (P, P). The
shared basis ``B`` is (P, K) with orthonormal columns and the loadings of a
subject are a (T_n, K) array ``c = relu(c_hat)``.

The augmented objective couples the basis to auxiliary variables
``D[n][t] ~ B diag(c[n][t])`` through multipliers ``lam[n][t]``::

    sum_n 1/T_n sum_t [ Tr(R^T L_n R)                 R = gamma - D B^T
                        + gamma Tr(lam^T (D - B diag c))
                        + gamma/2 ||D - B diag c||_F^2 ]
    + lambda * network loss

``Tr(R^T L R)`` equals the weighted residual ``Tr(R L R)`` whenever the
constraint holds, is linear in ``B`` once ``B^T B = I`` and is convex in
``D``; the basis step is therefore an exact orthogonal Procrustes problem and
the ``D`` step a linear solve.
"""
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .linalg import svd, weighted_frob_sq

__all__ = [
    "HyperParams",
    "CoefficientTrack",
    "ConstraintState",
    "ObjectiveTerms",
    "relu",
    "srddl_loss",
    "fidelity_terms",
    "augmented_objective",
    "procrustes_target",
    "update_basis",
    "PrimalSolver",
    "update_primal",
    "update_dual",
    "constraint_residual",
    "coeff_gradient_constraints",
    "constraint_loss",
    "nodti_fidelity",
    "nodti_objective",
    "nodti_procrustes_target",
    "nodti_update_primal",
    "nodti_coeff_gradient",
]


@dataclass
class HyperParams:
    """Hyperparameters of the joint optimization.

    Learning-rate schedules are geometric: the coefficient rate is multiplied
    by ``coeff_lr_decay`` every ``coeff_lr_every`` ADAM steps, the network
    rate by ``net_lr_decay`` every ``net_lr_every`` epochs, and the dual step
    by ``eta_decay`` every main iteration.
    """

    k: int = 15
    lambda_tradeoff: float = 3.0
    gamma: float = 20.0
    eta0: float = 1e-3
    eta_decay: float = 0.75
    coeff_lr: float = 0.01
    coeff_lr_decay: float = 0.9
    coeff_lr_every: int = 10
    coeff_steps: int = 50
    net_lr: float = 1e-4
    net_lr_decay: float = 0.95
    net_lr_every: int = 5
    epochs: int = 50
    main_iters: int = 30
    primal_dual_cycles: int = 5
    soft_init_iters: int = 20
    early_stop_tol: float = 1e-4
    early_stop_patience: int = 3
    hidden: int = 40
    head_width: int = 40
    clip_norm: Optional[float] = None

    def __post_init__(self):
        positive = ["k", "gamma", "eta0", "eta_decay", "coeff_lr", "coeff_lr_decay",
                    "coeff_lr_every", "net_lr", "net_lr_decay", "net_lr_every",
                    "hidden", "head_width"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"hyperparameter {name} must be positive, got {getattr(self, name)}")
        nonneg = ["lambda_tradeoff", "coeff_steps", "epochs", "main_iters",
                  "primal_dual_cycles", "soft_init_iters", "early_stop_tol",
                  "early_stop_patience"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"hyperparameter {name} must be nonnegative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when given")

    def eta(self, iteration):
        """Dual ascent step for 0-based main iteration ``iteration``."""
        return self.eta0 * self.eta_decay ** iteration

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class CoefficientTrack:
    """Loadings of one subject; ``c`` is the rectified ``c_hat``."""

    subject_id: str
    c_hat: np.ndarray

    @property
    def c(self):
        return relu(self.c_hat)


@dataclass
class ConstraintState:
    """Auxiliary variables and multipliers, one (T_n, P, K) array per subject."""

    d: list = field(default_factory=list)
    lam: list = field(default_factory=list)

    @classmethod
    def feasible(cls, b, coeffs):
        d = [b[None, :, :] * c[:, None, :] for c in coeffs]
        return cls(d=d, lam=[np.zeros_like(x) for x in d])


@dataclass
class ObjectiveTerms:
    fidelity: float
    network: float
    trace: float
    penalty: float

    @property
    def total(self):
        return self.fidelity + self.network + self.trace + self.penalty

    def to_dict(self):
        out = asdict(self)
        out["total"] = self.total
        return out


def _check_shapes(b, coeffs, gammas, laplacians=None):
    p, k = b.shape
    if len(coeffs) != len(gammas):
        raise ValueError(f"{len(coeffs)} coefficient tracks for {len(gammas)} subjects")
    if laplacians is not None and len(laplacians) != len(gammas):
        raise ValueError(f"{len(laplacians)} laplacians for {len(gammas)} subjects")
    for n, (c, g) in enumerate(zip(coeffs, gammas)):
        if g.shape[1:] != (p, p):
            raise ValueError(f"subject {n}: correlations {g.shape[1:]} vs basis rows {p}")
        if c.shape != (g.shape[0], k):
            raise ValueError(f"subject {n}: loadings {c.shape}, expected {(g.shape[0], k)}")
        if laplacians is not None and laplacians[n].shape != (p, p):
            raise ValueError(f"subject {n}: laplacian shape {laplacians[n].shape}")


def srddl_loss(b, coeffs, gammas, laplacians):
    """Laplacian-weighted reconstruction loss of the loadings ``coeffs`` (c >= 0)."""
    _check_shapes(b, coeffs, gammas, laplacians)
    total = 0.0
    for c, g, lap in zip(coeffs, gammas, laplacians):
        recon = np.einsum("pk,tk,qk->tpq", b, c, b)
        total += weighted_frob_sq(g - recon, lap).sum() / g.shape[0]
    return float(total)


def fidelity_terms(b, d, gammas, laplacian):
    """Per-window ``Tr(R^T L R)`` with ``R = gamma - D B^T`` for one subject."""
    r = gammas - d @ b.T
    return weighted_frob_sq(r, laplacian)


def augmented_objective(b, coeffs, state, gammas, laplacians, net_loss, hp):
    """All four terms of the augmented objective.

    ``net_loss`` is the summed (unweighted) prediction loss; it enters
    multiplied by ``hp.lambda_tradeoff``.
    """
    _check_shapes(b, coeffs, gammas, laplacians)
    fid = trace = pen = 0.0
    for c, d, lam, g, lap in zip(coeffs, state.d, state.lam, gammas, laplacians):
        t = g.shape[0]
        e = d - b[None] * c[:, None, :]
        fid += fidelity_terms(b, d, g, lap).sum() / t
        trace += hp.gamma * np.sum(lam * e) / t
        pen += 0.5 * hp.gamma * np.sum(e * e) / t
    return ObjectiveTerms(float(fid), float(hp.lambda_tradeoff * net_loss), float(trace), float(pen))


def procrustes_target(coeffs, state, gammas, laplacians, hp):
    """Matrix ``M`` whose polar factor minimizes the augmented objective over ``B``.

    ``M = sum_n 1/T_n sum_t (2 gamma_t L D_t + g D_t diag(c_t) + g lam_t diag(c_t))``
    where ``g`` is the penalty weight.
    """
    m = None
    for c, d, lam, g, lap in zip(coeffs, state.d, state.lam, gammas, laplacians):
        t = g.shape[0]
        term = 2.0 * g @ (lap @ d) + hp.gamma * (d + lam) * c[:, None, :]
        s = term.sum(axis=0) / t
        m = s if m is None else m + s
    if m is None:
        raise ValueError("empty cohort")
    return m


def update_basis(m, rank_tol=1e-10):
    """Orthonormal-column ``B`` closest to ``m`` in Frobenius norm (``U V^T``)."""
    res = svd(m)
    smax = res.s[0] if res.s.size else 0.0
    if res.s.size and res.s[-1] <= rank_tol * max(smax, 1e-300):
        warnings.warn("Procrustes target is rank deficient; null directions are "
                      "filled with a deterministic orthonormal complement",
                      RuntimeWarning, stacklevel=2)
    return res.u @ res.vt


class PrimalSolver:
    """Cached Cholesky factor of ``gamma I + 2 L`` for one subject."""

    def __init__(self, laplacian, gamma):
        p = laplacian.shape[0]
        self.factor = cho_factor(gamma * np.eye(p) + 2.0 * laplacian)

    def solve(self, rhs):
        t, p, k = rhs.shape
        flat = np.moveaxis(rhs, 0, 1).reshape(p, t * k)
        sol = cho_solve(self.factor, flat)
        return np.moveaxis(sol.reshape(p, t, k), 1, 0)


def update_primal(c, lam, gammas, laplacian, b, gamma, solver=None):
    """Closed-form minimizer of the augmented objective in ``D`` for one subject.

    ``D_t = (gamma I + 2L)^-1 (2 L gamma_t B + gamma B diag(c_t) - gamma lam_t)``;
    the 1/T_n weights cancel because every ``D``-dependent term carries them.
    """
    if solver is None:
        solver = PrimalSolver(laplacian, gamma)
    rhs = 2.0 * laplacian @ (gammas @ b) + gamma * (b[None] * c[:, None, :] - lam)
    return solver.solve(rhs)


def update_dual(lam, d, b, c, eta):
    """Gradient-ascent step on the multipliers of one subject."""
    if not eta > 0:
        raise ValueError("dual step must be positive")
    return lam + eta * (d - b[None] * c[:, None, :])


def constraint_residual(b, coeffs, state):
    """Largest ``||D_t - B diag(c_t)||_F`` over all subjects and windows."""
    worst = 0.0
    for c, d in zip(coeffs, state.d):
        e = d - b[None] * c[:, None, :]
        worst = max(worst, float(np.sqrt(np.sum(e * e, axis=(1, 2))).max()))
    return worst


def constraint_loss(c_hat, d, lam, b, gamma):
    """Multiplier and penalty terms of one subject as a function of ``c_hat``."""
    t = c_hat.shape[0]
    e = d - b[None] * relu(c_hat)[:, None, :]
    return float(gamma * np.sum(lam * e) / t + 0.5 * gamma * np.sum(e * e) / t)


def coeff_gradient_constraints(c_hat, d, lam, b, gamma):
    """Gradient of :func:`constraint_loss` with respect to ``c_hat``.

    The ReLU derivative is taken as one at exactly zero so that loadings
    sitting on the boundary can become active again.
    """
    t = c_hat.shape[0]
    c = relu(c_hat)
    proj = np.einsum("pk,tpk->tk", b, lam + d)
    grad_c = -(gamma / t) * (proj - c * np.sum(b * b, axis=0)[None, :])
    return grad_c * (c_hat >= 0)


# Variant without structural weighting: one constraint D = B for the whole
# cohort, with a single multiplier. The reconstruction uses D diag(c) B^T.

def nodti_fidelity(b, d, coeffs, gammas):
    total = 0.0
    for c, g in zip(coeffs, gammas):
        r = g - np.einsum("pk,tk,qk->tpq", d, c, b)
        total += np.sum(r * r) / g.shape[0]
    return float(total)


def nodti_objective(b, coeffs, d, lam, gammas, net_loss, hp):
    e = d - b
    return ObjectiveTerms(
        nodti_fidelity(b, d, coeffs, gammas),
        float(hp.lambda_tradeoff * net_loss),
        float(hp.gamma * np.sum(lam * e)),
        float(0.5 * hp.gamma * np.sum(e * e)),
    )


def nodti_procrustes_target(coeffs, d, lam, gammas, gamma):
    m = gamma * (d + lam)
    for c, g in zip(coeffs, gammas):
        m = m + 2.0 * np.einsum("tpq,qk,tk->pk", g, d, c) / g.shape[0]
    return m


def nodti_update_primal(b, coeffs, lam, gammas, gamma):
    k = b.shape[1]
    gram = b.T @ b
    rhs = gamma * (b - lam)
    lhs = gamma * np.eye(k)
    for c, g in zip(coeffs, gammas):
        t = g.shape[0]
        rhs = rhs + 2.0 * np.einsum("tpq,qk,tk->pk", g, b, c) / t
        lhs = lhs + 2.0 * np.einsum("tj,jk,tk->jk", c, gram, c) / t
    return np.linalg.solve(lhs.T, rhs.T).T


def nodti_coeff_gradient(c_hat, d, b, gammas):
    """Gradient of one subject's unweighted reconstruction term w.r.t. ``c_hat``."""
    t = c_hat.shape[0]
    c = relu(c_hat)
    r = gammas - np.einsum("pk,tk,qk->tpq", d, c, b)
    grad_c = -(2.0 / t) * np.einsum("pk,tpq,qk->tk", d, r, b)
    return grad_c * (c_hat >= 0)
