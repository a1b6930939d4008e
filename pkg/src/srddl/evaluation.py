"""Cross-validation, prediction metrics and the betweenness-centrality baseline.

``run_cv`` refits a model on each training fold and predicts the held-out
subjects from their inferred loadings. Everything derived from data
(adjacency imputation, score scaling, feature scaling) is computed from the
training fold alone, so test subjects can only influence their own
predictions.
"""
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numba as nb
import numpy as np

from .dictionary import HyperParams
from .exceptions import DataWarning
from .linalg import sym_eig
from .optimizer import VARIANTS, complete_structure, consensus_adjacency, fit_variant, infer_new
from .predictor import (AdamState, PredictorParams, forward_batch, predict_scores,
                        train_network)

logger = logging.getLogger(__name__)

__all__ = [
    "mae",
    "nmi",
    "betweenness_centrality",
    "bc_features",
    "FoldSplit",
    "MetricReport",
    "CvDetails",
    "run_cv",
    "bc_baseline_cv",
    "scree_export",
    "sweep",
    "CV_VARIANTS",
]

CV_VARIANTS = VARIANTS + ("bc",)
SWEEP_AXES = ("lambda", "window_length", "stride")


def _paired(pred, truth):
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction length {pred.size} != truth length {truth.size}")
    keep = np.isfinite(truth)
    if not np.all(np.isfinite(pred[keep])):
        raise ValueError("predictions must be finite where the truth is observed")
    return pred[keep], truth[keep]


def mae(pred, truth):
    """Median absolute error; pairs with a missing (NaN) truth are skipped.

    An even number of pairs gives the midpoint of the two central errors.
    """
    pred, truth = _paired(pred, truth)
    if pred.size == 0:
        raise ValueError("no observed pairs to score")
    return float(np.median(np.abs(pred - truth)))


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth, bins=None):
    """Normalized mutual information of the discretized distributions.

    Both vectors are binned on ``bins`` equal-width bins spanning their pooled
    range (default ``ceil(sqrt(N))``) and
    ``(H(y) + H(p) - H(y, p)) / min(H(y), H(p))`` is returned, clipped to
    [0, 1]. When either marginal has zero entropy the value is 1 if both
    vectors are the same constant and 0 otherwise, and a DataWarning is
    raised.
    """
    pred, truth = _paired(pred, truth)
    n = pred.size
    if n < 2:
        raise ValueError("NMI needs at least two observed pairs")
    bins = int(math.ceil(math.sqrt(n))) if bins is None else int(bins)
    if bins < 1:
        raise ValueError("bins must be positive")
    lo = min(pred.min(), truth.min())
    hi = max(pred.max(), truth.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    joint, _, _ = np.histogram2d(truth, pred, bins=(edges, edges))
    h_t = _entropy(joint.sum(axis=1))
    h_p = _entropy(joint.sum(axis=0))
    if h_t == 0.0 or h_p == 0.0:
        same = bool(np.all(pred == pred[0]) and np.all(truth == truth[0])
                    and pred[0] == truth[0])
        warnings.warn("NMI of a constant vector is undefined; using the degenerate rule",
                      DataWarning, stacklevel=2)
        return 1.0 if same else 0.0
    value = (h_t + h_p - _entropy(joint.ravel())) / min(h_t, h_p)
    return float(min(max(value, 0.0), 1.0))


@nb.njit(cache=True)
def _brandes(w, rtol):
    p = w.shape[0]
    bc = np.zeros(p)
    dist = np.empty(p)
    sigma = np.empty(p)
    delta = np.empty(p)
    done = np.empty(p, dtype=np.bool_)
    pred = np.empty((p, p), dtype=np.bool_)
    order = np.empty(p, dtype=np.int64)
    for s in range(p):
        dist[:] = np.inf
        sigma[:] = 0.0
        done[:] = False
        pred[:, :] = False
        dist[s] = 0.0
        sigma[s] = 1.0
        settled = 0
        while True:
            u = -1
            best = np.inf
            for v in range(p):
                if not done[v] and dist[v] < best:
                    best = dist[v]
                    u = v
            if u < 0:
                break
            done[u] = True
            order[settled] = u
            settled += 1
            for v in range(p):
                if w[u, v] <= 0.0 or done[v]:
                    continue
                alt = dist[u] + 1.0 / w[u, v]
                tol = rtol * alt
                if alt < dist[v] - tol:
                    dist[v] = alt
                    sigma[v] = sigma[u]
                    pred[v, :] = False
                    pred[v, u] = True
                elif abs(alt - dist[v]) <= tol:
                    sigma[v] += sigma[u]
                    pred[v, u] = True
        delta[:] = 0.0
        for i in range(settled - 1, -1, -1):
            x = order[i]
            for v in range(p):
                if pred[x, v]:
                    delta[v] += sigma[v] / sigma[x] * (1.0 + delta[x])
            if x != s:
                bc[x] += delta[x]
    return bc / 2.0


def betweenness_centrality(psi, rtol=1e-12):
    """Betweenness of every node of an undirected weighted graph.

    Edges are the positive entries of ``psi``; an edge of weight ``w`` has
    length ``1 / w``. Each unordered pair of other nodes contributes the
    fraction of its shortest paths that pass through the node, so a path
    ``a - b - c`` gives ``b`` a value of 1. Path lengths within ``rtol`` of
    each other count as ties.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2 or psi.shape[0] != psi.shape[1]:
        raise ValueError(f"graph must be square, got {psi.shape}")
    if not np.all(np.isfinite(psi)):
        raise ValueError("graph weights must be finite")
    if np.any(psi < 0):
        raise ValueError("graph weights must be nonnegative; threshold negatives first")
    if np.abs(psi - psi.T).max(initial=0.0) > 1e-12 * max(1.0, float(np.abs(psi).max(initial=0))):
        raise ValueError("graph must be symmetric")
    w = 0.5 * (psi + psi.T)
    np.fill_diagonal(w, 0.0)
    return _brandes(np.ascontiguousarray(w), float(rtol))


def bc_features(gammas, adjacency):
    """(T, P) betweenness track of the graphs ``A o Gamma_t`` with negatives set to 0."""
    a = np.asarray(adjacency, dtype=float)
    return np.stack([betweenness_centrality(np.maximum(a * g, 0.0)) for g in gammas])


@dataclass(frozen=True)
class FoldSplit:
    """Assignment of every subject to exactly one test fold."""

    assignments: Dict[str, int]
    n_folds: int
    seed: int

    @classmethod
    def make(cls, subject_ids, n_folds=5, seed=0):
        ids = [str(s) for s in subject_ids]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        if not 2 <= n_folds <= len(ids):
            raise ValueError(f"need 2 <= folds <= {len(ids)}, got {n_folds}")
        order = np.random.default_rng(seed).permutation(len(ids))
        assignments = {ids[j]: int(pos % n_folds) for pos, j in enumerate(order)}
        return cls(assignments, int(n_folds), int(seed))

    def test_ids(self, fold):
        return [s for s, f in self.assignments.items() if f == fold]

    def train_ids(self, fold):
        return [s for s, f in self.assignments.items() if f != fold]

    def fold_of(self, subject_id):
        return self.assignments[str(subject_id)]


@dataclass
class CvDetails:
    """Per-subject outputs of a cross-validation run (not part of the report)."""

    subject_ids: List[str]
    folds: List[int]
    test_predictions: np.ndarray
    attention: List[np.ndarray]


@dataclass
class MetricReport:
    """Per-score MAE and NMI on training and test subjects.

    Test metrics pool the held-out predictions of all folds (each subject is
    predicted once). Training metrics are averaged over folds.
    ``baseline_mae_test`` is the test MAE of predicting the training-fold
    mean of each score.
    """

    variant: str
    n_folds: int
    seed: int
    score_names: List[str]
    mae_train: List[float]
    mae_test: List[float]
    nmi_train: List[float]
    nmi_test: List[float]
    baseline_mae_test: List[float]
    folds: List[dict]
    details: Optional[CvDetails] = field(default=None, repr=False, compare=False)

    def to_dict(self):
        out = asdict(replace(self, details=None))
        out.pop("details")
        return out


def _score_metrics(pred, truth, bins, with_nmi=True):
    m = truth.shape[1]
    maes, nmis = [], []
    for j in range(m):
        observed = np.isfinite(truth[:, j])
        if not observed.any():
            maes.append(float("nan"))
            nmis.append(float("nan"))
            continue
        maes.append(mae(pred[:, j], truth[:, j]))
        nmis.append(nmi(pred[:, j], truth[:, j], bins)
                    if with_nmi and observed.sum() >= 2 else float("nan"))
    return maes, nmis


class _ScoreScaler:
    """Per-score standardization fitted on observed training scores."""

    def __init__(self, y, enabled):
        if enabled:
            self.mean = np.nanmean(y, axis=0)
            std = np.nanstd(y, axis=0)
            self.std = np.where(std > 0, std, 1.0)
        else:
            self.mean = np.zeros(y.shape[1])
            self.std = np.ones(y.shape[1])

    def forward(self, y):
        return (y - self.mean) / self.std

    def inverse(self, y):
        return y * self.std + self.mean


def _fold_seeds(seed, n_folds):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_folds)]


def _cv_loop(subjects, scores, n_folds, seed, bins, variant, fit_predict):
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    if scores.shape[0] != len(subjects):
        raise ValueError(f"{scores.shape[0]} score rows for {len(subjects)} subjects")
    ids = [s.subject_id for s in subjects]
    split = FoldSplit.make(ids, n_folds, seed)
    index = {s: i for i, s in enumerate(ids)}
    m = scores.shape[1]
    test_pred = np.full((len(subjects), m), np.nan)
    baseline = np.full((len(subjects), m), np.nan)
    attention: List[Optional[np.ndarray]] = [None] * len(subjects)
    folds = []
    for fold, fold_seed in enumerate(_fold_seeds(seed, n_folds)):
        tr = [index[s] for s in split.train_ids(fold)]
        te = [index[s] for s in split.test_ids(fold)]
        train_pred, pred, att = fit_predict([subjects[i] for i in tr], scores[tr],
                                            [subjects[i] for i in te], fold_seed)
        test_pred[te] = pred
        for i, a in zip(te, att):
            attention[i] = a
        baseline[te] = np.nanmean(scores[tr], axis=0)
        tr_mae, tr_nmi = _score_metrics(train_pred, scores[tr], bins)
        te_mae, te_nmi = _score_metrics(pred, scores[te], bins)
        folds.append({"fold": fold, "n_train": len(tr), "n_test": len(te),
                      "mae_train": tr_mae, "mae_test": te_mae,
                      "nmi_train": tr_nmi, "nmi_test": te_nmi})
        logger.info("fold %d done: test MAE %s", fold, te_mae)
    mae_test, nmi_test = _score_metrics(test_pred, scores, bins)
    base_mae, _ = _score_metrics(baseline, scores, None, with_nmi=False)
    return MetricReport(
        variant=variant, n_folds=n_folds, seed=int(seed),
        score_names=[f"score_{j + 1}" for j in range(m)],
        mae_train=np.nanmean([f["mae_train"] for f in folds], axis=0).tolist(),
        mae_test=mae_test,
        nmi_train=np.nanmean([f["nmi_train"] for f in folds], axis=0).tolist(),
        nmi_test=nmi_test,
        baseline_mae_test=base_mae,
        folds=folds,
        details=CvDetails(ids, [split.fold_of(s) for s in ids], test_pred, attention),
    )


def run_cv(subjects, scores, hp=None, variant="srddl", seed=0, n_folds=5, bins=None,
           standardize=False):
    """K-fold cross-validation of one of the joint-model variants.

    Parameters
    ----------
    subjects : list of Subject
        Subjects without structure get the strict-majority graph of their
        training fold.
    scores : (N, M) array, NaN where missing
    hp : HyperParams
    variant : {"srddl", "no-dti", "decoupled"}
    seed : int
        Drives the fold split and every per-fold fit.
    standardize : bool
        Scale scores with training-fold statistics before fitting.

    Returns
    -------
    MetricReport
        ``report.details`` carries the held-out predictions and attention.
    """
    if variant == "bc":
        return bc_baseline_cv(subjects, scores, hp, seed, n_folds, bins)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {CV_VARIANTS}")
    hp = hp or HyperParams()

    def fit_predict(train, y_train, test, fold_seed):
        scaler = _ScoreScaler(y_train, standardize)
        state = fit_variant(variant, train, scaler.forward(y_train), hp, fold_seed)
        train_pred = scaler.inverse(predict_scores(state.params, state.coefficients))
        traces = [trace for _, trace in infer_new(state, test)]
        pred = scaler.inverse(np.stack([t.prediction for t in traces]))
        return train_pred, pred, [t.attention for t in traces]

    return _cv_loop(subjects, scores, n_folds, seed, bins, variant, fit_predict)


def bc_baseline_cv(subjects, scores, hp=None, seed=0, n_folds=5, bins=None, head_width=200):
    """Cross-validated betweenness-centrality baseline.

    Each window becomes the (P,) betweenness vector of ``A o Gamma_t``; the
    resulting (T, P) tracks feed the same attention LSTM with heads of width
    ``head_width``. Features are standardized per region with training-fold
    statistics. The network gets the budget of the joint model:
    ``main_iters`` rounds of ``epochs`` epochs.
    """
    hp = hp or HyperParams()
    cache: Dict[str, np.ndarray] = {}

    def features(s, imputed):
        if s.adjacency is not None and not imputed:
            if s.subject_id not in cache:
                cache[s.subject_id] = bc_features(s.gammas, s.adjacency)
            return cache[s.subject_id]
        return bc_features(s.gammas, s.adjacency)

    def fit_predict(train, y_train, test, fold_seed):
        missing_train = {s.subject_id for s in train if s.adjacency is None}
        missing_test = {s.subject_id for s in test if s.adjacency is None}
        consensus = consensus_adjacency(train)
        train_s = complete_structure(train, consensus)
        test_s = complete_structure(test, consensus)
        if any(s.adjacency is None for s in train_s + test_s):
            raise ValueError("the betweenness baseline needs binary adjacencies")
        x_train = [features(s, s.subject_id in missing_train) for s in train_s]
        x_test = [features(s, s.subject_id in missing_test) for s in test_s]
        stacked = np.concatenate(x_train)
        mu = stacked.mean(axis=0)
        sd = stacked.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        x_train = [(x - mu) / sd for x in x_train]
        x_test = [(x - mu) / sd for x in x_test]
        init_ss, shuffle_ss = np.random.SeedSequence(fold_seed).spawn(2)
        params = PredictorParams.initialize(x_train[0].shape[1], y_train.shape[1],
                                            np.random.default_rng(init_ss), hidden=hp.hidden,
                                            head_width=head_width)
        rng = np.random.default_rng(shuffle_ss)
        adam = AdamState.zeros_like(params.vector)
        for _ in range(max(hp.main_iters, 1)):
            _, adam, _ = train_network(params, x_train, y_train, rng, epochs=hp.epochs,
                                       lr=hp.net_lr, lr_decay=hp.net_lr_decay,
                                       lr_every=hp.net_lr_every, adam=adam,
                                       clip_norm=hp.clip_norm)
        traces = forward_batch(params, x_test).traces
        return (predict_scores(params, x_train), np.stack([t.prediction for t in traces]),
                [t.attention for t in traces])

    return _cv_loop(subjects, scores, n_folds, seed, bins, "bc", fit_predict)


def scree_export(subjects):
    """Rows ``(index, mean, std)`` of the descending eigenvalue spectrum.

    Eigenvalues of every window of every subject are sorted in descending
    order and averaged position by position.
    """
    spectra = [sym_eig(g)[0] for s in subjects for g in s.gammas]
    if not spectra:
        raise ValueError("no correlation matrices to analyze")
    spectra = np.stack(spectra)
    mean = spectra.mean(axis=0)
    std = spectra.std(axis=0)
    return [{"index": i + 1, "mean": float(mu), "std": float(sd)}
            for i, (mu, sd) in enumerate(zip(mean, std))]


def sweep(cohort, scores, axis, grid, hp=None, variant="srddl", seed=0, n_folds=5,
          window=None, residualize=True):
    """Cross-validated test MAE as one setting varies, all else fixed.

    ``axis="lambda"`` accepts a list of Subject. The window axes need raw
    data: ``cohort`` is then a list of RawSubject and ``window`` the base
    WindowSpec whose length or stride is replaced by each grid value.

    Returns
    -------
    list of dict
        ``{"axis", "value", "mae_1", ..., "mae_M"}`` per grid value.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    hp = hp or HyperParams()
    rows = []
    for value in grid:
        if axis == "lambda":
            subjects = list(cohort)
            run_hp = replace(hp, lambda_tradeoff=float(value))
        else:
            if window is None:
                raise ValueError("window sweeps need the base WindowSpec")
            spec = replace(window, **{axis: int(value)})
            subjects = [r.to_subject(spec, residualize) for r in cohort]
            run_hp = hp
        report = run_cv(subjects, scores, run_hp, variant, seed, n_folds)
        row = {"axis": axis, "value": float(value)}
        for j, v in enumerate(report.mae_test):
            row[f"mae_{j + 1}"] = v
        rows.append(row)
    return rows
