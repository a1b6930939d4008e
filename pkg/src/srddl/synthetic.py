"""Synthetic cohorts with known basis, loadings, graphs and scores.

The generator follows the model the optimizer assumes: a shared basis,
nonnegative loadings that vary smoothly over windows, per-subject random
graphs, correlation windows ``B diag(c) B^T`` plus structured noise, and
scores produced by a randomly initialized attention LSTM with folded
Gaussian noise. :func:`similarity` scores how well a recovered basis
matches the generating one.
"""
import csv
import io
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .connectome import StructuralGraph, Subject, normalized_laplacian
from .exceptions import DataWarning
from .linalg import sym_eig
from .predictor import PredictorParams, predict_scores

logger = logging.getLogger(__name__)

__all__ = ["SynthConfig", "GroundTruth", "gen_basis", "gen_coeffs", "gen_laplacian",
           "gen_correlations", "gen_scores", "generate", "similarity", "noise_sweep",
           "SWEEP_AXES"]

SWEEP_AXES = ("sigma_b", "sigma_gamma", "sigma_y")


@dataclass
class SynthConfig:
    """Generator settings.

    ``edge_prior`` is either one probability for every region pair or a
    (P, P) array. ``length_scale`` defaults to ``t / 10`` windows. The raw
    output of the random score network barely varies across subjects, so
    each score is standardized over the drawn cohort and mapped to
    ``score_offset + score_scale * z`` before noise is added.
    """

    n_subjects: int = 60
    k: int = 4
    m: int = 3
    t: int = 30
    p: int = 30
    sigma_c: float = 4.0
    sigma_b: float = 0.2
    sigma_gamma: float = 0.2
    sigma_y: float = 0.2
    edge_prior: Union[float, np.ndarray] = 0.3
    length_scale: Optional[float] = None
    score_offset: float = 3.0
    score_scale: float = 1.0
    hidden: int = 40
    head_width: int = 40
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_c", "sigma_b", "sigma_gamma", "sigma_y", "score_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("n_subjects", "k", "m", "t", "p"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.k > self.p:
            raise ValueError("k cannot exceed p")
        prior = np.asarray(self.edge_prior, dtype=float)
        if prior.ndim not in (0, 2) or np.any((prior < 0) | (prior > 1)):
            raise ValueError("edge_prior must be a probability or a (P, P) array of them")
        if prior.ndim == 2 and prior.shape != (self.p, self.p):
            raise ValueError(f"edge_prior must be ({self.p}, {self.p})")

    @property
    def scale(self):
        return self.length_scale if self.length_scale is not None else self.t / 10.0

    def to_dict(self):
        d = asdict(self)
        if isinstance(self.edge_prior, np.ndarray):
            d["edge_prior"] = self.edge_prior.tolist()
        return d


@dataclass
class GroundTruth:
    b: np.ndarray
    coeffs: List[np.ndarray]
    graphs: List[StructuralGraph]
    gammas: List[np.ndarray]
    scores: np.ndarray
    theta: PredictorParams
    clean_scores: np.ndarray = field(repr=False, default=None)


def _orthonormal(x):
    q, r = np.linalg.qr(x)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def gen_basis(p, k, sigma_b, rng):
    """Orthonormalized Gaussian matrix plus N(0, sigma_b) entries."""
    b = _orthonormal(rng.standard_normal((p, k)))
    if sigma_b > 0:
        b = b + rng.normal(0.0, sigma_b, size=(p, k))
    return b


def _gp_factor(t, sigma, length_scale):
    idx = np.arange(t, dtype=float)
    cov = sigma ** 2 * np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / length_scale) ** 2)
    vals, vecs = np.linalg.eigh(cov)
    # eigen square root tolerates the near-singular squared-exponential kernel
    return vecs * np.sqrt(np.maximum(vals, 0.0))


def gen_coeffs(t, k, sigma_c, rng, length_scale=None, return_raw=False):
    """(T, K) loadings: independent zero-mean squared-exponential GPs per column,
    marginal standard deviation ``sigma_c``, clipped at zero."""
    length_scale = t / 10.0 if length_scale is None else length_scale
    if length_scale <= 0:
        raise ValueError("length scale must be positive")
    z = rng.standard_normal((t, k))
    raw = _gp_factor(t, sigma_c, length_scale) @ z if sigma_c > 0 else np.zeros((t, k))
    clipped = np.maximum(raw, 0.0)
    return (clipped, raw) if return_raw else clipped


def gen_laplacian(p, edge_priors, rng):
    """Bernoulli graph on the upper triangle, symmetrized, with its Laplacian."""
    prior = np.broadcast_to(np.asarray(edge_priors, dtype=float), (p, p))
    draws = rng.random((p, p)) < prior
    upper = np.triu(draws, k=1)
    adjacency = (upper | upper.T).astype(float)
    return normalized_laplacian(adjacency)


def gen_correlations(b, track, laplacian, sigma_gamma):
    """Windows ``B diag(c_t) B^T + sigma_gamma X X^T``, X the Laplacian eigenbasis."""
    _, x = sym_eig(laplacian)
    noise = sigma_gamma * (x @ x.T)
    gam = np.einsum("pk,tk,qk->tpq", b, track, b) + noise[None]
    return 0.5 * (gam + np.swapaxes(gam, 1, 2))


def calibrate(raw, offset, scale):
    """Per-column ``offset + scale * (raw - mean) / std``; constant columns map to ``offset``."""
    raw = np.asarray(raw, dtype=float)
    std = raw.std(axis=0)
    z = (raw - raw.mean(axis=0)) / np.where(std > 0, std, 1.0)
    return offset + scale * z


def gen_scores(params, tracks, sigma_y, rng, offset=None, scale=1.0):
    """Folded scores ``|G(c) + N(0, sigma_y)|`` for a list of tracks.

    ``G`` is the network output ``F(c)``, or its :func:`calibrate` version
    when ``offset`` is given.
    """
    clean = predict_scores(params, tracks)
    if offset is not None:
        clean = calibrate(clean, offset, scale)
    noisy = clean + (rng.normal(0.0, sigma_y, size=clean.shape) if sigma_y > 0 else 0.0)
    return np.abs(noisy), clean


def _streams(seed, n):
    basis_ss, theta_ss, subj_ss, noise_ss = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(basis_ss), np.random.default_rng(theta_ss),
            [np.random.default_rng(s) for s in subj_ss.spawn(n)],
            np.random.default_rng(noise_ss))


def generate(cfg, n_extra=0):
    """Draw a cohort from ``cfg``.

    ``n_extra`` additional subjects share the basis and score network; they
    are returned after the first ``cfg.n_subjects`` and serve as held-out
    data.

    Returns
    -------
    subjects : list of Subject
    scores : (N, M) ndarray
    truth : GroundTruth
    """
    n = cfg.n_subjects + n_extra
    basis_rng, theta_rng, subject_rngs, noise_rng = _streams(cfg.seed, n)
    b = gen_basis(cfg.p, cfg.k, cfg.sigma_b, basis_rng)
    theta = PredictorParams.initialize(cfg.k, cfg.m, theta_rng, hidden=cfg.hidden,
                                       head_width=cfg.head_width)
    coeffs, graphs, gammas = [], [], []
    prior = np.asarray(cfg.edge_prior, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        for rng in subject_rngs:
            c = gen_coeffs(cfg.t, cfg.k, cfg.sigma_c, rng, cfg.scale)
            g = gen_laplacian(cfg.p, prior, rng)
            coeffs.append(c)
            graphs.append(g)
            gammas.append(gen_correlations(b, c, g.laplacian, cfg.sigma_gamma))
    scores, clean = gen_scores(theta, coeffs, cfg.sigma_y, noise_rng, cfg.score_offset,
                               cfg.score_scale)
    width = len(str(n - 1))
    subjects = [Subject(f"sub{i:0{width}d}", gam, adjacency=g.adjacency, laplacian=g.laplacian)
                for i, (gam, g) in enumerate(zip(gammas, graphs))]
    truth = GroundTruth(b=b, coeffs=coeffs, graphs=graphs, gammas=gammas, scores=scores,
                        theta=theta, clean_scores=clean)
    return subjects, scores, truth


def similarity(true_b, recovered_b, matching="hungarian"):
    """Mean matched ``|b_k^T r_k| / ||b_k||`` with unit-norm recovered columns.

    Columns are paired by maximum total absolute inner product (Hungarian
    assignment) or, with ``matching="greedy"``, by repeatedly taking the
    largest remaining entry.
    """
    tb = np.asarray(true_b, dtype=float)
    rb = np.asarray(recovered_b, dtype=float)
    if tb.shape != rb.shape:
        raise ValueError(f"basis shapes differ: {tb.shape} vs {rb.shape}")
    tn = np.linalg.norm(tb, axis=0)
    rn = np.linalg.norm(rb, axis=0)
    if np.any(tn == 0) or np.any(rn == 0):
        raise ValueError("basis columns must be nonzero")
    score = np.abs((tb / tn).T @ (rb / rn))
    k = score.shape[0]
    if matching == "hungarian":
        rows, cols = linear_sum_assignment(score, maximize=True)
    elif matching == "greedy":
        work = score.copy()
        rows, cols = [], []
        for _ in range(k):
            i, j = np.unravel_index(np.argmax(work), work.shape)
            rows.append(i)
            cols.append(j)
            work[i, :] = -1.0
            work[:, j] = -1.0
    else:
        raise ValueError(f"unknown matching {matching!r}")
    return float(score[rows, cols].mean())


def noise_sweep(axis, grid, trials, base=None, hp=None, seed=0, n_heldout=15,
                callback=None):
    """Recovery and prediction error as one noise level varies.

    For each grid value and trial a fresh cohort is drawn, the joint model is
    fitted, and held-out subjects (same basis and score network) are scored.

    Returns
    -------
    list of dict
        One row per grid value with ``noise``, ``s_mean``, ``s_stderr`` and
        ``mae_<m>`` (median absolute error on held-out subjects, averaged over
        trials) for every score.
    """
    from .optimizer import fit
    from .qp import infer_loadings
    from .evaluation import mae

    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if trials < 1:
        raise ValueError("need at least one trial")
    base = base or SynthConfig()
    seeds = np.random.SeedSequence(seed).generate_state(len(grid) * trials, dtype=np.uint32)
    rows = []
    for gi, value in enumerate(grid):
        sims, maes = [], []
        for trial in range(trials):
            trial_seed = int(seeds[gi * trials + trial])
            cfg = replace(base, **{axis: float(value)}, seed=trial_seed)
            subjects, scores, truth = generate(cfg, n_extra=n_heldout)
            train, test = subjects[:cfg.n_subjects], subjects[cfg.n_subjects:]
            state = fit(train, scores[:cfg.n_subjects], hp, seed=trial_seed)
            sims.append(similarity(truth.b, state.b))
            if test:
                tracks = [infer_loadings(state.b, s.gammas, s.laplacian) for s in test]
                pred = predict_scores(state.params, tracks)
                maes.append([mae(pred[:, j], scores[cfg.n_subjects:, j])
                             for j in range(cfg.m)])
            if callback is not None:
                callback({"axis": axis, "noise": float(value), "trial": trial,
                          "similarity": sims[-1]})
        sims = np.asarray(sims)
        row = {"noise": float(value), "s_mean": float(sims.mean()),
               "s_stderr": float(sims.std(ddof=1) / np.sqrt(len(sims))) if len(sims) > 1 else 0.0}
        if maes:
            for j, v in enumerate(np.mean(maes, axis=0)):
                row[f"mae_{j + 1}"] = float(v)
        rows.append(row)
    return rows


def sweep_csv(rows):
    """CSV text for :func:`noise_sweep` rows."""
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
