"""Alternating minimization of the joint factorization and prediction loss.

Each main iteration runs four steps in order:

1. basis update by orthogonal Procrustes,
2. ADAM on the pre-activation loadings with the constraint gradient plus the
   weighted gradient back-propagated through the network,
3. network training on the current loadings,
4. a few primal/dual cycles on the auxiliary variables and multipliers.

Three variants share the loop. ``srddl`` uses Laplacian-weighted residuals
with one auxiliary variable per window, ``no-dti`` uses plain residuals with
a single cohort-wide auxiliary copy of the basis, and ``decoupled`` runs the
factorization without the network and fits the network afterwards on the
frozen loadings.
"""
import copy
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import dictionary as dl
from .connectome import Subject, impute_adjacency
from .dictionary import ConstraintState, CoefficientTrack, HyperParams, relu
from .exceptions import NumericalFailure
from .linalg import sym_eig
from .predictor import (AdamState, PredictorParams, adam_step, loss_and_grads,
                        forward_batch, train_network)
from .qp import infer_loadings, infer_subject

logger = logging.getLogger(__name__)

__all__ = ["VARIANTS", "TrainState", "soft_init", "fit", "fit_no_dti", "fit_decoupled",
           "fit_variant", "network_loss", "cohort_arrays", "consensus_adjacency",
           "complete_structure", "infer_new"]

VARIANTS = ("srddl", "no-dti", "decoupled")


@dataclass
class TrainState:
    """Everything the alternating minimization carries between iterations.

    ``history`` holds one objective breakdown per completed main iteration
    and ``residuals`` the matching largest constraint violation, so both
    have length ``iteration``.
    """

    variant: str
    hp: HyperParams
    seed: int
    b: np.ndarray
    tracks: List[CoefficientTrack]
    constraints: ConstraintState
    params: Optional[PredictorParams] = None
    net_adam: Optional[AdamState] = None
    iteration: int = 0
    history: List[dict] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)
    net_losses: List[float] = field(default_factory=list)
    init_objective: Optional[dict] = None
    stopped_early: bool = False
    consensus_adjacency: Optional[np.ndarray] = None

    @property
    def coefficients(self):
        return [t.c for t in self.tracks]

    def objective_totals(self):
        return np.array([h["total"] for h in self.history])


def cohort_arrays(subjects, weighted=True):
    """Correlation stacks and weights of a cohort.

    Subjects without structure are rejected for the weighted model; the
    unweighted model ignores structure entirely.
    """
    if not subjects:
        raise ValueError("cohort is empty")
    gammas = [s.gammas for s in subjects]
    p = gammas[0].shape[1]
    if any(g.shape[1] != p for g in gammas):
        raise ValueError("all subjects must share the number of regions")
    if not weighted:
        return gammas, [np.eye(p)] * len(subjects)
    missing = [s.subject_id for s in subjects if not s.has_structure]
    if missing:
        raise ValueError(f"subjects without structural graph: {missing[:5]}")
    return gammas, [s.laplacian for s in subjects]


def consensus_adjacency(subjects):
    """Strict-majority graph over the subjects that carry an adjacency, or None."""
    graphs = [s.adjacency for s in subjects if s.adjacency is not None]
    return impute_adjacency(graphs).adjacency if graphs else None


def complete_structure(subjects, consensus):
    """Give subjects without structure the ``consensus`` adjacency."""
    if all(s.has_structure for s in subjects):
        return list(subjects)
    if consensus is None:
        raise ValueError("subjects lack structure and no adjacency is available to impute from")
    return [s if s.has_structure else Subject(s.subject_id, s.gammas, adjacency=consensus)
            for s in subjects]


def infer_new(state, subjects):
    """Loadings and forward traces for subjects outside the training set.

    Subjects without structure use the training consensus graph; the
    unweighted variant ignores structure.
    """
    if state.params is None:
        raise ValueError("state has no trained network")
    if state.variant == "no-dti":
        laps = [np.eye(s.n_regions) for s in subjects]
    else:
        laps = [s.laplacian for s in complete_structure(subjects, state.consensus_adjacency)]
    out = []
    for s, lap in zip(subjects, laps):
        if s.n_regions != state.b.shape[0]:
            raise ValueError(f"subject {s.subject_id} has {s.n_regions} regions, "
                             f"model expects {state.b.shape[0]}")
        out.append(infer_subject(state.b, state.params, s.gammas, lap, s.subject_id))
    return out


def _check_scores(scores, n):
    y = np.asarray(scores, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != n:
        raise ValueError(f"scores must have shape ({n}, M), got {y.shape}")
    if np.any(np.isinf(y)):
        raise ValueError("scores must be finite or NaN (missing)")
    return y


def soft_init(gammas, laplacians, hp):
    """Factorization-only warm start.

    The basis starts from the leading eigenvectors of the cohort-mean
    correlation; each of ``hp.soft_init_iters`` rounds solves the loadings
    exactly for the current basis and then takes a Procrustes basis step.

    Returns
    -------
    b : (P, K) ndarray
    coeffs : list of (T_n, K) arrays
    state : ConstraintState
        Feasible auxiliaries ``D = B diag(c)`` and zero multipliers.
    """
    if not gammas:
        raise ValueError("cohort is empty")
    p = gammas[0].shape[1]
    if hp.k > p:
        raise ValueError(f"k={hp.k} exceeds the number of regions {p}")
    mean = sum(g.sum(axis=0) for g in gammas) / sum(g.shape[0] for g in gammas)
    _, vectors = sym_eig(0.5 * (mean + mean.T))
    b = vectors[:, :hp.k]
    coeffs = [infer_loadings(b, g, lap) for g, lap in zip(gammas, laplacians)]
    for _ in range(hp.soft_init_iters):
        state = ConstraintState.feasible(b, coeffs)
        b = dl.update_basis(dl.procrustes_target(coeffs, state, gammas, laplacians, hp))
        coeffs = [infer_loadings(b, g, lap) for g, lap in zip(gammas, laplacians)]
    return b, coeffs, ConstraintState.feasible(b, coeffs)


def network_loss(params, coeffs, scores):
    """Summed masked loss over subjects, with per-subject input gradients."""
    losses, grad_inputs = loss_and_grads(params, coeffs, scores)
    return float(losses.sum()), grad_inputs


def _net_loss_only(params, coeffs, scores):
    if params is None:
        return 0.0
    cache = forward_batch(params, coeffs)
    total = 0.0
    for trace, y in zip(cache.traces, scores):
        mask = np.isfinite(y)
        err = np.where(mask, trace.prediction - np.where(mask, y, 0.0), 0.0)
        total += float(err @ err)
    return total


class _Weighted:
    """Laplacian-weighted model with per-window constraints."""

    name = "srddl"

    def __init__(self, gammas, laplacians, hp):
        self.gammas, self.laplacians, self.hp = gammas, laplacians, hp
        self.solvers = [dl.PrimalSolver(lap, hp.gamma) for lap in laplacians]

    def initial_state(self, b, coeffs):
        return ConstraintState.feasible(b, coeffs)

    def basis_step(self, b, coeffs, state):
        return dl.update_basis(dl.procrustes_target(coeffs, state, self.gammas,
                                                    self.laplacians, self.hp))

    def coeff_grads(self, b, c_hats, state):
        return [dl.coeff_gradient_constraints(ch, d, lam, b, self.hp.gamma)
                for ch, d, lam in zip(c_hats, state.d, state.lam)]

    def primal_dual(self, b, coeffs, state, eta):
        for n, c in enumerate(coeffs):
            state.d[n] = dl.update_primal(c, state.lam[n], self.gammas[n], self.laplacians[n],
                                          b, self.hp.gamma, self.solvers[n])
            state.lam[n] = dl.update_dual(state.lam[n], state.d[n], b, c, eta)

    def objective(self, b, coeffs, state, net):
        return dl.augmented_objective(b, coeffs, state, self.gammas, self.laplacians, net,
                                      self.hp)

    def residual(self, b, coeffs, state):
        return dl.constraint_residual(b, coeffs, state)


class _Plain:
    """Unweighted model with one cohort-wide constraint ``D = B``."""

    name = "no-dti"

    def __init__(self, gammas, laplacians, hp):
        self.gammas, self.hp = gammas, hp

    def initial_state(self, b, coeffs):
        return ConstraintState(d=[b.copy()], lam=[np.zeros_like(b)])

    def basis_step(self, b, coeffs, state):
        return dl.update_basis(dl.nodti_procrustes_target(coeffs, state.d[0], state.lam[0],
                                                          self.gammas, self.hp.gamma))

    def coeff_grads(self, b, c_hats, state):
        return [dl.nodti_coeff_gradient(ch, state.d[0], b, g)
                for ch, g in zip(c_hats, self.gammas)]

    def primal_dual(self, b, coeffs, state, eta):
        state.d[0] = dl.nodti_update_primal(b, coeffs, state.lam[0], self.gammas, self.hp.gamma)
        state.lam[0] = state.lam[0] + eta * (state.d[0] - b)

    def objective(self, b, coeffs, state, net):
        return dl.nodti_objective(b, coeffs, state.d[0], state.lam[0], self.gammas, net, self.hp)

    def residual(self, b, coeffs, state):
        return float(np.linalg.norm(state.d[0] - b))


def _coefficient_step(model, b, c_hats, state, params, scores, hp):
    """ADAM on the stacked pre-activation loadings of all subjects."""
    sizes = [c.size for c in c_hats]
    shapes = [c.shape for c in c_hats]
    flat = np.concatenate([np.maximum(c, 0.0).ravel() for c in c_hats])
    adam = AdamState.zeros_like(flat)
    use_net = params is not None and hp.lambda_tradeoff > 0
    splits = np.cumsum(sizes)[:-1]
    for step in range(hp.coeff_steps):
        current = [x.reshape(s) for x, s in zip(np.split(flat, splits), shapes)]
        grads = model.coeff_grads(b, current, state)
        if use_net:
            _, net_grads = network_loss(params, [relu(c) for c in current], scores)
            grads = [g + hp.lambda_tradeoff * ng * (c >= 0)
                     for g, ng, c in zip(grads, net_grads, current)]
        rate = hp.coeff_lr * hp.coeff_lr_decay ** (step // hp.coeff_lr_every)
        adam_step(flat, np.concatenate([g.ravel() for g in grads]), adam, rate)
    if not np.all(np.isfinite(flat)):
        raise NumericalFailure("non-finite loadings in coefficient step")
    return [x.reshape(s).copy() for x, s in zip(np.split(flat, splits), shapes)]


def _record(state, model, scores, started, callback):
    coeffs = state.coefficients
    net = _net_loss_only(state.params, coeffs, scores)
    terms = model.objective(state.b, coeffs, state.constraints, net)
    if not np.isfinite(terms.total):
        raise NumericalFailure(f"non-finite objective at iteration {state.iteration}",
                               step=state.iteration)
    res = model.residual(state.b, coeffs, state.constraints)
    state.iteration += 1
    state.history.append(terms.to_dict())
    state.residuals.append(res)
    state.net_losses.append(net)
    if callback is not None:
        callback({"iteration": state.iteration, **terms.to_dict(), "residual": res,
                  "network_loss": net, "wall_time": time.perf_counter() - started})


def _should_stop(history, hp):
    if hp.early_stop_patience <= 0 or len(history) <= hp.early_stop_patience:
        return False
    totals = [h["total"] for h in history[-hp.early_stop_patience - 1:]]
    for prev, cur in zip(totals[:-1], totals[1:]):
        if (prev - cur) / max(abs(prev), 1e-300) >= hp.early_stop_tol:
            return False
    return True


def _rngs(seed):
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(shuffle_ss)


def _run(model, gammas, laplacians, scores, hp, seed, variant, with_network, callback):
    started = time.perf_counter()
    n = len(gammas)
    scores = _check_scores(scores, n)
    init_rng, shuffle_rng = _rngs(seed)

    b, coeffs, _ = soft_init(gammas, laplacians, hp)
    state = TrainState(variant=variant, hp=hp, seed=seed, b=b,
                       tracks=[CoefficientTrack(str(i), c) for i, c in enumerate(coeffs)],
                       constraints=model.initial_state(b, coeffs))
    # weights are always drawn so every variant consumes the same random stream
    params = PredictorParams.initialize(hp.k, scores.shape[1], init_rng,
                                        hidden=hp.hidden, head_width=hp.head_width)
    if with_network:
        state.params = params
        state.net_adam = AdamState.zeros_like(params.vector)
    init_net = _net_loss_only(state.params, coeffs, scores)
    state.init_objective = model.objective(b, coeffs, state.constraints, init_net).to_dict()

    last_good = None
    try:
        for it in range(hp.main_iters):
            last_good = copy.deepcopy(state)
            # basis
            state.b = model.basis_step(state.b, state.coefficients, state.constraints)
            # loadings
            c_hats = _coefficient_step(model, state.b, [t.c_hat for t in state.tracks],
                                       state.constraints, state.params, scores, hp)
            for track, ch in zip(state.tracks, c_hats):
                track.c_hat = ch
            # network
            if with_network:
                _, state.net_adam, _ = train_network(
                    state.params, state.coefficients, scores, shuffle_rng, epochs=hp.epochs,
                    lr=hp.net_lr, lr_decay=hp.net_lr_decay, lr_every=hp.net_lr_every,
                    adam=state.net_adam, clip_norm=hp.clip_norm)
            # auxiliaries and multipliers
            coeffs = state.coefficients
            for _ in range(hp.primal_dual_cycles):
                model.primal_dual(state.b, coeffs, state.constraints, hp.eta(it))
            _record(state, model, scores, started, callback)
            if _should_stop(state.history, hp):
                state.stopped_early = True
                break
    except NumericalFailure as exc:
        exc.state = last_good
        raise
    return state, shuffle_rng


def fit(subjects, scores, hp=None, seed=0, callback=None):
    """Joint factorization and network training with Laplacian weighting.

    Parameters
    ----------
    subjects : list of Subject
        Subjects without structure get the strict-majority graph of the
        others.
    scores : (N, M) array
        NaN marks a missing score.
    hp : HyperParams
    seed : int
        Sole source of randomness (network init and shuffles).
    callback : callable, optional
        Receives one dict per main iteration (objective terms, residual,
        wall time).

    Raises
    ------
    NumericalFailure
        With ``.state`` holding the last completed TrainState.
    """
    hp = hp or HyperParams()
    consensus = consensus_adjacency(subjects)
    subjects = complete_structure(subjects, consensus)
    gammas, laps = cohort_arrays(subjects, weighted=True)
    state, _ = _run(_Weighted(gammas, laps, hp), gammas, laps, scores, hp, seed,
                    "srddl", True, callback)
    _label(state, subjects, consensus)
    return state


def fit_no_dti(subjects, scores, hp=None, seed=0, callback=None):
    """As :func:`fit` with unweighted residuals and a single ``D = B`` constraint."""
    hp = hp or HyperParams()
    gammas, eyes = cohort_arrays(subjects, weighted=False)
    state, _ = _run(_Plain(gammas, eyes, hp), gammas, eyes, scores, hp, seed,
                    "no-dti", True, callback)
    _label(state, subjects, None)
    return state


def fit_decoupled(subjects, scores, hp=None, seed=0, callback=None):
    """Factorization without the network, then network training on frozen loadings.

    The network gets the same budget as in :func:`fit`: ``main_iters`` rounds
    of ``epochs`` epochs, each round restarting the rate schedule.
    """
    hp = hp or HyperParams()
    consensus = consensus_adjacency(subjects)
    subjects = complete_structure(subjects, consensus)
    gammas, laps = cohort_arrays(subjects, weighted=True)
    state, shuffle_rng = _run(_Weighted(gammas, laps, hp), gammas, laps, scores, hp, seed,
                              "decoupled", False, callback)
    scores = _check_scores(scores, len(subjects))
    init_rng, _ = _rngs(seed)
    params = PredictorParams.initialize(hp.k, scores.shape[1], init_rng,
                                        hidden=hp.hidden, head_width=hp.head_width)
    adam = AdamState.zeros_like(params.vector)
    frozen = [c.copy() for c in state.coefficients]
    state.net_losses = []
    for _ in range(max(hp.main_iters, 1)):
        _, adam, losses = train_network(params, frozen, scores, shuffle_rng, epochs=hp.epochs,
                                        lr=hp.net_lr, lr_decay=hp.net_lr_decay,
                                        lr_every=hp.net_lr_every, adam=adam,
                                        clip_norm=hp.clip_norm)
        state.net_losses.append(float(losses[-1]) if losses.size else 0.0)
    state.params, state.net_adam = params, adam
    _label(state, subjects, consensus)
    return state


def fit_variant(variant, subjects, scores, hp=None, seed=0, callback=None):
    fns = {"srddl": fit, "no-dti": fit_no_dti, "decoupled": fit_decoupled}
    if variant not in fns:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return fns[variant](subjects, scores, hp, seed, callback)


def _label(state, subjects, consensus):
    for track, s in zip(state.tracks, subjects):
        track.subject_id = s.subject_id
    state.consensus_adjacency = consensus
