"""Building dynamic correlation sequences and structural Laplacians.

Regional time series are cut into sliding windows, each window is turned into
a Pearson correlation matrix, and the dominant eigen-component is removed.
Binary structural adjacencies become normalized graph Laplacians.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ContractViolation, DataWarning
from .linalg import check_symmetric, sym_eig

logger = logging.getLogger(__name__)

__all__ = [
    "WindowSpec",
    "StructuralGraph",
    "Subject",
    "RawSubject",
    "sliding_windows",
    "n_windows",
    "pearson_correlation",
    "residualize_first_component",
    "correlation_sequence",
    "normalized_laplacian",
    "impute_adjacency",
]


@dataclass(frozen=True)
class WindowSpec:
    window_length: int
    stride: int

    def __post_init__(self):
        if self.stride < 1 or self.window_length < self.stride:
            raise ValueError(
                f"need 1 <= stride <= window_length, got stride={self.stride}, "
                f"window_length={self.window_length}"
            )

    def validate_for(self, samples):
        if self.window_length > samples:
            raise ValueError(
                f"window length {self.window_length} exceeds series length {samples}"
            )


@dataclass
class StructuralGraph:
    adjacency: np.ndarray
    laplacian: np.ndarray
    degree: np.ndarray


@dataclass
class Subject:
    """One subject's inputs to the factorization.

    ``gammas`` has shape (T, P, P). Either ``adjacency`` or ``laplacian`` may
    be given; a subject with neither is left for fold-local imputation.
    """

    subject_id: str
    gammas: np.ndarray
    adjacency: Optional[np.ndarray] = None
    laplacian: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.subject_id = str(self.subject_id)
        g = np.asarray(self.gammas, dtype=float)
        if g.ndim == 2:
            g = g[None]
        if g.ndim != 3 or g.shape[1] != g.shape[2] or g.shape[0] < 1:
            raise ValueError(f"gammas must have shape (T, P, P), got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"subject {self.subject_id}: non-finite correlation entries")
        self.gammas = g
        if self.adjacency is not None:
            self.adjacency = np.asarray(self.adjacency, dtype=float)
            if self.laplacian is None:
                self.laplacian = normalized_laplacian(self.adjacency).laplacian
        if self.laplacian is not None:
            self.laplacian = check_symmetric(np.asarray(self.laplacian, dtype=float),
                                             name="laplacian")
            if self.laplacian.shape[0] != self.n_regions:
                raise ValueError("laplacian size does not match correlation size")

    @property
    def n_windows(self):
        return self.gammas.shape[0]

    @property
    def n_regions(self):
        return self.gammas.shape[1]

    @property
    def has_structure(self):
        return self.laplacian is not None


@dataclass
class RawSubject:
    """Regional time series (P, samples) and optional binary adjacency."""

    subject_id: str
    timeseries: np.ndarray
    adjacency: Optional[np.ndarray] = None

    def __post_init__(self):
        self.subject_id = str(self.subject_id)
        ts = np.asarray(self.timeseries, dtype=float)
        if ts.ndim != 2:
            raise ValueError(f"time series must be (regions, samples), got {ts.shape}")
        if not np.all(np.isfinite(ts)):
            raise ValueError(f"subject {self.subject_id}: non-finite time series entries")
        self.timeseries = ts
        if self.adjacency is not None:
            self.adjacency = _check_adjacency(self.adjacency)
            if self.adjacency.shape[0] != ts.shape[0]:
                raise ValueError("adjacency size does not match the number of regions")

    def to_subject(self, spec, residualize=True):
        return Subject(self.subject_id, correlation_sequence(self.timeseries, spec, residualize),
                       adjacency=self.adjacency)


def n_windows(samples, spec):
    spec.validate_for(samples)
    return (samples - spec.window_length) // spec.stride + 1


def sliding_windows(data, spec):
    """Cut a (P, samples) series into windows of shape (P, window_length).

    Windows start at sample 0 and advance by ``spec.stride``; trailing samples
    that do not fill a window are dropped.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise ValueError(f"time series must be (regions, samples), got {data.shape}")
    count = n_windows(data.shape[1], spec)
    starts = np.arange(count) * spec.stride
    return [data[:, s:s + spec.window_length] for s in starts]


def pearson_correlation(segment):
    """Pearson correlation between the rows of a (P, W) segment.

    Rows with zero variance get zero off-diagonal correlations (with a
    warning) instead of NaN; the diagonal is always one.
    """
    x = np.asarray(segment, dtype=float)
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered * centered, axis=1))
    flat = norms <= 1e-12 * max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)
    if np.any(flat):
        warnings.warn(
            f"{int(flat.sum())} region(s) with zero variance in window; "
            "their correlations are set to 0",
            DataWarning,
            stacklevel=2,
        )
    safe = np.where(flat, 1.0, norms)
    z = centered / safe[:, None]
    z[flat] = 0.0
    corr = z @ z.T
    corr = 0.5 * (corr + corr.T)
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, 1.0)
    return corr


def residualize_first_component(gamma):
    """Remove the leading eigen-component ``lambda_1 v_1 v_1^T`` from ``gamma``."""
    values, vectors = sym_eig(gamma)
    v = vectors[:, 0]
    out = np.asarray(gamma, dtype=float) - values[0] * np.outer(v, v)
    return 0.5 * (out + out.T)


def correlation_sequence(data, spec, residualize=True):
    """Sliding-window correlations of one subject, shape (T, P, P)."""
    mats = [pearson_correlation(seg) for seg in sliding_windows(data, spec)]
    if residualize:
        mats = [residualize_first_component(m) for m in mats]
    return np.stack(mats)


def _check_adjacency(a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"adjacency must be square, got shape {a.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ContractViolation("adjacency must be binary")
    if not np.array_equal(a, a.T):
        raise ContractViolation("adjacency must be symmetric")
    if np.any(np.diag(a) != 0):
        raise ContractViolation("adjacency must have a zero diagonal")
    return a


def normalized_laplacian(a):
    """Normalized Laplacian ``V^-1/2 (V - A) V^-1/2`` of a binary graph.

    Isolated nodes are given unit degree, which leaves an identity entry on
    their diagonal and zeros elsewhere in their row and column.
    """
    a = _check_adjacency(a)
    degree = a.sum(axis=1)
    isolated = degree == 0
    if np.any(isolated):
        warnings.warn(f"{int(isolated.sum())} isolated node(s) in structural graph",
                      DataWarning, stacklevel=2)
    inv_sqrt = 1.0 / np.sqrt(np.where(isolated, 1.0, degree))
    lap = np.diag(np.where(isolated, 1.0, degree)) - a
    lap = inv_sqrt[:, None] * lap * inv_sqrt[None, :]
    return StructuralGraph(adjacency=a, laplacian=0.5 * (lap + lap.T), degree=degree)


def impute_adjacency(training_adjacencies):
    """Strict-majority edge vote over the training graphs.

    Accepts adjacency arrays or StructuralGraph objects and returns the graph
    whose edges appear in more than half of them.
    """
    mats = [_check_adjacency(getattr(g, "adjacency", g)) for g in training_adjacencies]
    if not mats:
        raise ValueError("cannot impute adjacency from an empty training set")
    votes = np.sum(mats, axis=0)
    return normalized_laplacian((2 * votes > len(mats)).astype(float))
