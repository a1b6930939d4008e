"""scikit-learn style front end.

``DeepSRDDL`` wraps the joint optimizer: ``fit`` learns the basis, the
training loadings and the score network; ``transform`` infers loadings for
any subjects; ``predict`` maps them to scores. Samples are
:class:`~srddl.connectome.Subject` objects because correlation sequences
differ in length between subjects.
"""
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .connectome import Subject, WindowSpec, correlation_sequence
from .dictionary import HyperParams
from .evaluation import bc_features, mae
from .optimizer import VARIANTS, fit_variant, infer_new

__all__ = ["DeepSRDDL", "SlidingWindowCorrelation", "BetweennessFeatures"]


def _check_subjects(x):
    if isinstance(x, Subject):
        x = [x]
    x = list(x)
    if not x:
        raise ValueError("need at least one subject")
    bad = [type(s).__name__ for s in x if not isinstance(s, Subject)]
    if bad:
        raise TypeError(f"samples must be Subject instances, got {bad[0]}")
    return x


class DeepSRDDL(RegressorMixin, BaseEstimator):
    """Joint dynamic dictionary learning and attention-LSTM score regression.

    Parameters
    ----------
    n_components : int
        Number of basis subnetworks (K).
    tradeoff : float
        Weight of the score loss in the joint objective.
    penalty : float
        Augmented Lagrangian penalty on the auxiliary variables.
    variant : {"srddl", "no-dti", "decoupled"}
    max_iter : int
        Main alternating-minimization iterations.
    epochs : int
        Network epochs per main iteration.
    coeff_steps : int
        ADAM steps on the loadings per main iteration.
    dual_step : float
        Initial dual ascent step.
    tol : float
        Relative objective decrease below which an iteration counts toward
        early stopping (3 in a row stop the run).
    hidden, head_width : int
        LSTM width and head width of the score network.
    standardize_scores : bool
        Fit on per-score standardized targets and map predictions back.
    random_state : int
        Seed for network initialization and shuffling.

    Attributes
    ----------
    components_ : ndarray of shape (n_regions, n_components)
    state_ : TrainState
    n_outputs_ : int
    """

    def __init__(self, n_components=15, tradeoff=3.0, penalty=20.0, variant="srddl",
                 max_iter=30, epochs=50, coeff_steps=50, dual_step=1e-3, tol=1e-4,
                 hidden=40, head_width=40, standardize_scores=False, random_state=0):
        self.n_components = n_components
        self.tradeoff = tradeoff
        self.penalty = penalty
        self.variant = variant
        self.max_iter = max_iter
        self.epochs = epochs
        self.coeff_steps = coeff_steps
        self.dual_step = dual_step
        self.tol = tol
        self.hidden = hidden
        self.head_width = head_width
        self.standardize_scores = standardize_scores
        self.random_state = random_state

    def hyperparams(self):
        return HyperParams(k=self.n_components, lambda_tradeoff=self.tradeoff,
                           gamma=self.penalty, eta0=self.dual_step, main_iters=self.max_iter,
                           epochs=self.epochs, coeff_steps=self.coeff_steps,
                           early_stop_tol=self.tol, hidden=self.hidden,
                           head_width=self.head_width)

    def fit(self, X, y, callback=None):
        """Fit on subjects ``X`` and scores ``y`` of shape (N,) or (N, M); NaN = missing."""
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        subjects = _check_subjects(X)
        y = np.asarray(y, dtype=float)
        self._single_output = y.ndim == 1
        y = y.reshape(len(subjects), -1) if y.ndim == 1 else y
        if y.shape[0] != len(subjects):
            raise ValueError(f"{y.shape[0]} score rows for {len(subjects)} subjects")
        if self.standardize_scores:
            self.score_mean_ = np.nanmean(y, axis=0)
            std = np.nanstd(y, axis=0)
            self.score_scale_ = np.where(std > 0, std, 1.0)
        else:
            self.score_mean_ = np.zeros(y.shape[1])
            self.score_scale_ = np.ones(y.shape[1])
        target = (y - self.score_mean_) / self.score_scale_
        self.state_ = fit_variant(self.variant, subjects, target, self.hyperparams(),
                                  int(self.random_state), callback)
        self.components_ = self.state_.b
        self.n_outputs_ = y.shape[1]
        self.n_features_in_ = subjects[0].n_regions
        return self

    def transform(self, X):
        """Nonnegative loadings (T_n, K) of every subject, one array each."""
        check_is_fitted(self, "state_")
        return [track.c for track, _ in infer_new(self.state_, _check_subjects(X))]

    def predict(self, X, return_attention=False):
        """Predicted scores (N, M), or (N,) when fitted on a 1-D target."""
        check_is_fitted(self, "state_")
        out = infer_new(self.state_, _check_subjects(X))
        pred = np.stack([trace.prediction for _, trace in out])
        pred = pred * self.score_scale_ + self.score_mean_
        if self._single_output:
            pred = pred[:, 0]
        if return_attention:
            return pred, [trace.attention for _, trace in out]
        return pred

    def score(self, X, y, sample_weight=None):
        """Negative median absolute error averaged over scores (higher is better)."""
        pred = np.asarray(self.predict(X)).reshape(len(_check_subjects(X)), -1)
        y = np.asarray(y, dtype=float).reshape(pred.shape)
        return -float(np.mean([mae(pred[:, j], y[:, j]) for j in range(pred.shape[1])]))


class SlidingWindowCorrelation(TransformerMixin, BaseEstimator):
    """Regional time series (P, samples) to correlation stacks (T, P, P).

    Parameters
    ----------
    window_length, stride : int
        In samples.
    residualize : bool
        Remove the leading eigen-component of every window.
    """

    def __init__(self, window_length=45, stride=5, residualize=True):
        self.window_length = window_length
        self.stride = stride
        self.residualize = residualize

    def fit(self, X, y=None):
        self.spec_ = WindowSpec(int(self.window_length), int(self.stride))
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        return [correlation_sequence(ts, self.spec_, self.residualize) for ts in X]


class BetweennessFeatures(TransformerMixin, BaseEstimator):
    """Per-window betweenness of ``A o Gamma_t`` for each subject, shape (T, P).

    Features are standardized per region with statistics from ``fit``.
    """

    def __init__(self, standardize=True):
        self.standardize = standardize

    @staticmethod
    def _raw(X):
        subjects = _check_subjects(X)
        missing = [s.subject_id for s in subjects if s.adjacency is None]
        if missing:
            raise ValueError(f"subjects without adjacency: {missing[:5]}")
        return [bc_features(s.gammas, s.adjacency) for s in subjects]

    def fit(self, X, y=None):
        stacked = np.concatenate(self._raw(X))
        self.mean_ = stacked.mean(axis=0) if self.standardize else np.zeros(stacked.shape[1])
        std = stacked.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0) if self.standardize else np.ones_like(std)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return [(x - self.mean_) / self.scale_ for x in self._raw(X)]
