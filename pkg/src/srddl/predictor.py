"""Attention LSTM that maps a loading track to clinical scores.

A two-layer LSTM encodes the (T, K) track. Two small ReLU networks read each
hidden state: one emits a per-window score estimate (T, M), the other a
scalar logit per window. A softmax over the logits weights the per-window
estimates into the final (M,) prediction.

All weights live in one flat float64 vector so that ADAM runs as a single
vectorized update; :class:`PredictorParams` exposes named views into it.
Gradients are derived by hand; the recurrent part runs in compiled kernels
from :mod:`srddl._lstm`.
"""
import logging
import warnings
from functools import lru_cache
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import _lstm
from .exceptions import DataWarning, NumericalFailure

logger = logging.getLogger(__name__)

__all__ = [
    "PredictorParams",
    "ForwardTrace",
    "AdamState",
    "forward",
    "forward_batch",
    "masked_mse",
    "backward",
    "backward_batch",
    "loss_and_grads",
    "adam_step",
    "train_network",
    "predict_scores",
]

_HEADS = ("pann", "aann")


@lru_cache(maxsize=64)
def _layout(n_inputs, n_outputs, hidden, head_width, n_layers):
    shapes = []
    width = n_inputs
    for layer in range(n_layers):
        shapes += [
            (f"lstm{layer}.wx", (width, 4 * hidden)),
            (f"lstm{layer}.wh", (hidden, 4 * hidden)),
            (f"lstm{layer}.b", (4 * hidden,)),
        ]
        width = hidden
    for head, out in (("pann", n_outputs), ("aann", 1)):
        shapes += [
            (f"{head}.w0", (hidden, head_width)),
            (f"{head}.b0", (head_width,)),
            (f"{head}.w1", (head_width, head_width)),
            (f"{head}.b1", (head_width,)),
            (f"{head}.w2", (head_width, out)),
            (f"{head}.b2", (out,)),
        ]
    layout = {}
    offset = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        layout[name] = (offset, offset + size, shape)
        offset += size
    return layout, offset


class PredictorParams:
    """Weights of the LSTM and both heads, stored in one flat vector.

    Parameters
    ----------
    n_inputs : int
        Width of the input track (K).
    n_outputs : int
        Number of scores (M).
    hidden : int
        LSTM hidden width.
    head_width : int
        Width of the two hidden layers of each head.
    n_layers : int
        Number of stacked LSTM layers.
    vector : ndarray, optional
        Flat parameter vector; zeros when omitted.

    Notes
    -----
    LSTM gate blocks along the last weight axis are ordered input, forget,
    output, cell. ``params["lstm0.wx"]`` returns a writable view.
    """

    def __init__(self, n_inputs, n_outputs, hidden=40, head_width=40, n_layers=2,
                 vector=None):
        if min(n_inputs, n_outputs, hidden, head_width, n_layers) < 1:
            raise ValueError("all predictor widths must be positive")
        self.n_inputs = int(n_inputs)
        self.n_outputs = int(n_outputs)
        self.hidden = int(hidden)
        self.head_width = int(head_width)
        self.n_layers = int(n_layers)
        self.layout, size = _layout(self.n_inputs, self.n_outputs, self.hidden,
                                    self.head_width, self.n_layers)
        if vector is None:
            vector = np.zeros(size)
        vector = np.ascontiguousarray(vector, dtype=float)
        if vector.shape != (size,):
            raise ValueError(f"parameter vector must have length {size}, got {vector.shape}")
        self.vector = vector

    @classmethod
    def initialize(cls, n_inputs, n_outputs, rng, hidden=40, head_width=40, n_layers=2):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

        The forget-gate biases start at one.
        """
        params = cls(n_inputs, n_outputs, hidden, head_width, n_layers)
        for name, (_, _, shape) in params.layout.items():
            if len(shape) == 2:
                bound = 1.0 / np.sqrt(shape[0])
                params[name][...] = rng.uniform(-bound, bound, size=shape)
        for layer in range(n_layers):
            params[f"lstm{layer}.b"][hidden:2 * hidden] = 1.0
        return params

    @property
    def size(self):
        return self.vector.size

    def config(self):
        return {"n_inputs": self.n_inputs, "n_outputs": self.n_outputs,
                "hidden": self.hidden, "head_width": self.head_width,
                "n_layers": self.n_layers}

    def __getitem__(self, name):
        start, stop, shape = self.layout[name]
        return self.vector[start:stop].reshape(shape)

    def names(self):
        return list(self.layout)

    def copy(self):
        return PredictorParams(vector=self.vector.copy(), **self.config())

    def like(self, vector):
        """Same layout, different values (used for gradients)."""
        return PredictorParams(vector=vector, **self.config())

    def to_arrays(self):
        return {name: self[name].copy() for name in self.layout}

    @classmethod
    def from_arrays(cls, config, arrays):
        params = cls(**config)
        missing = set(params.layout) - set(arrays)
        if missing:
            raise ValueError(f"missing predictor arrays: {sorted(missing)}")
        for name in params.layout:
            value = np.asarray(arrays[name], dtype=float)
            if value.shape != params[name].shape:
                raise ValueError(f"{name}: shape {value.shape}, expected {params[name].shape}")
            params[name][...] = value
        return params

    def __eq__(self, other):
        return (isinstance(other, PredictorParams) and self.config() == other.config()
                and np.array_equal(self.vector, other.vector))

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"PredictorParams({cfg}, size={self.size})"


@dataclass
class ForwardTrace:
    """Per-subject outputs of a forward pass."""

    hidden: np.ndarray
    step_predictions: np.ndarray
    logits: np.ndarray
    attention: np.ndarray
    prediction: np.ndarray


@dataclass
class _BatchCache:
    x: np.ndarray
    lengths: np.ndarray
    layers: list
    flat_index: np.ndarray
    head_cache: dict
    traces: List[ForwardTrace] = field(default_factory=list)


def _as_track(track, n_inputs):
    x = np.asarray(getattr(track, "c", track), dtype=float)
    if x.ndim != 2 or x.shape[1] != n_inputs:
        raise ValueError(f"track must have shape (T, {n_inputs}), got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("track must contain at least one window")
    return x


def _first_bad_step(arr, lengths):
    bad = ~np.isfinite(arr).reshape(arr.shape[0], arr.shape[1], -1).all(axis=2)
    for n, length in enumerate(lengths):
        steps = np.flatnonzero(bad[n, :length])
        if steps.size:
            return n, int(steps[0])
    return None


def _check_finite(arr, lengths, what):
    if np.isfinite(arr).all():
        return
    hit = _first_bad_step(arr, lengths)
    if hit is not None:
        n, t = hit
        raise NumericalFailure(f"non-finite {what} for sequence {n} at step {t}", step=t)


def _mlp_forward(params, head, x):
    a0 = np.maximum(x @ params[f"{head}.w0"] + params[f"{head}.b0"], 0.0)
    a1 = np.maximum(a0 @ params[f"{head}.w1"] + params[f"{head}.b1"], 0.0)
    out = a1 @ params[f"{head}.w2"] + params[f"{head}.b2"]
    return out, (a0, a1)


def _mlp_backward(params, grads, head, x, cache, dout):
    a0, a1 = cache
    grads[f"{head}.w2"][...] += a1.T @ dout
    grads[f"{head}.b2"][...] += dout.sum(axis=0)
    dz1 = (dout @ params[f"{head}.w2"].T) * (a1 > 0)
    grads[f"{head}.w1"][...] += a0.T @ dz1
    grads[f"{head}.b1"][...] += dz1.sum(axis=0)
    dz0 = (dz1 @ params[f"{head}.w1"].T) * (a0 > 0)
    grads[f"{head}.w0"][...] += x.T @ dz0
    grads[f"{head}.b0"][...] += dz0.sum(axis=0)
    return dz0 @ params[f"{head}.w0"].T


def forward_batch(params, tracks):
    """Forward pass over several tracks of possibly different lengths.

    Every subject is processed independently; batching only amortizes call
    overhead, so each result equals a single-track :func:`forward`.
    """
    xs = [_as_track(t, params.n_inputs) for t in tracks]
    if not xs:
        raise ValueError("need at least one track")
    lengths = np.array([x.shape[0] for x in xs], dtype=np.int64)
    tmax = int(lengths.max())
    nb = len(xs)
    x = np.zeros((nb, tmax, params.n_inputs))
    for n, xn in enumerate(xs):
        x[n, :xn.shape[0]] = xn
    _check_finite(x, lengths, "input")

    h = params.hidden
    layers = []
    inp = x
    for layer in range(params.n_layers):
        hs = np.empty((nb, tmax, h))
        cs = np.empty((nb, tmax, h))
        tcs = np.empty((nb, tmax, h))
        gates = np.empty((nb, tmax, 4 * h))
        xw = inp @ params[f"lstm{layer}.wx"] + params[f"lstm{layer}.b"]
        _lstm.lstm_forward(xw, lengths, params[f"lstm{layer}.wh"], hs, cs, tcs, gates)
        _check_finite(hs, lengths, f"LSTM layer {layer} state")
        layers.append((inp, hs, cs, tcs, gates))
        inp = hs

    # flatten the valid steps of every sequence for the heads
    valid = np.arange(tmax)[None, :] < lengths[:, None]
    flat_index = np.flatnonzero(valid.ravel())
    top = inp.reshape(nb * tmax, h)[flat_index]
    step_pred, pcache = _mlp_forward(params, "pann", top)
    logits, acache = _mlp_forward(params, "aann", top)
    logits = logits[:, 0]
    if not (np.all(np.isfinite(step_pred)) and np.all(np.isfinite(logits))):
        bad = ~(np.isfinite(step_pred).all(axis=1) & np.isfinite(logits))
        pos = int(flat_index[np.argmax(bad)])
        raise NumericalFailure(f"non-finite head output at step {pos % tmax}", step=pos % tmax)

    cache = _BatchCache(x=x, lengths=lengths, layers=layers, flat_index=flat_index,
                        head_cache={"top": top, "pann": pcache, "aann": acache})
    start = 0
    for n, length in enumerate(lengths):
        stop = start + int(length)
        lg = logits[start:stop]
        w = np.exp(lg - lg.max())
        w /= w.sum()
        yt = step_pred[start:stop]
        cache.traces.append(ForwardTrace(
            hidden=inp[n, :length].copy(),
            step_predictions=yt,
            logits=lg,
            attention=w,
            prediction=w @ yt,
        ))
        start = stop
    return cache


def forward(params, track):
    """Forward pass for one track (T, K); returns a :class:`ForwardTrace`."""
    return forward_batch(params, [track]).traces[0]


def _score_mask(scores, m):
    y = np.asarray(scores, dtype=float).reshape(-1)
    if y.shape != (m,):
        raise ValueError(f"score vector must have length {m}, got {y.shape[0]}")
    mask = np.isfinite(y)
    return np.where(mask, y, 0.0), mask


def masked_mse(trace, scores, warn=True):
    """Sum of squared errors over the observed (non-NaN) scores.

    A subject with no observed score has loss 0 and triggers a DataWarning.
    """
    y, mask = _score_mask(scores, trace.prediction.shape[0])
    if warn and not mask.any():
        warnings.warn("subject has no observed scores; loss is 0", DataWarning, stacklevel=2)
    err = np.where(mask, trace.prediction - y, 0.0)
    return float(err @ err)


def backward_batch(params, cache, scores):
    """Gradients of the summed masked loss over a batch.

    Returns
    -------
    grads : PredictorParams
        Gradient with respect to every weight, summed over subjects.
    grad_inputs : list of ndarray
        Per-subject gradient with respect to the input track, each (T_n, K).
    losses : ndarray
        Per-subject masked loss.
    """
    nb = len(cache.traces)
    if len(scores) != nb:
        raise ValueError(f"{len(scores)} score vectors for {nb} tracks")
    m = params.n_outputs
    total_steps = cache.flat_index.size
    d_step = np.empty((total_steps, m))
    d_logit = np.empty(total_steps)
    losses = np.empty(nb)
    start = 0
    for n, trace in enumerate(cache.traces):
        y, mask = _score_mask(scores[n], m)
        err = np.where(mask, trace.prediction - y, 0.0)
        losses[n] = err @ err
        dy = 2.0 * err
        a = trace.attention
        stop = start + a.size
        d_step[start:stop] = a[:, None] * dy[None, :]
        da = trace.step_predictions @ dy
        d_logit[start:stop] = a * (da - a @ da)
        start = stop

    grads = params.like(np.zeros(params.size))
    top = cache.head_cache["top"]
    dtop = _mlp_backward(params, grads, "pann", top, cache.head_cache["pann"], d_step)
    dtop += _mlp_backward(params, grads, "aann", top, cache.head_cache["aann"],
                          d_logit[:, None])

    nbatch, tmax, _ = cache.x.shape
    h = params.hidden
    dhs = np.zeros((nbatch * tmax, h))
    dhs[cache.flat_index] = dtop
    dhs = dhs.reshape(nbatch, tmax, h)
    dz = np.empty((nbatch, tmax, 4 * h))
    for layer in range(params.n_layers - 1, -1, -1):
        inp, hs, cs, tcs, gates = cache.layers[layer]
        _lstm.lstm_backward(cache.lengths, np.ascontiguousarray(params[f"lstm{layer}.wh"].T),
                            cs, tcs, gates, dhs, dz)
        flat_dz = dz.reshape(-1, 4 * h)
        hprev = np.zeros_like(hs)
        hprev[:, 1:] = hs[:, :-1]
        grads[f"lstm{layer}.wx"][...] += inp.reshape(-1, inp.shape[2]).T @ flat_dz
        grads[f"lstm{layer}.wh"][...] += hprev.reshape(-1, h).T @ flat_dz
        grads[f"lstm{layer}.b"][...] += flat_dz.sum(axis=0)
        dhs = dz @ params[f"lstm{layer}.wx"].T
    grad_inputs = [dhs[n, :length].copy() for n, length in enumerate(cache.lengths)]
    return grads, grad_inputs, losses


def backward(params, track, scores):
    """Exact gradients of :func:`masked_mse` for one subject.

    Returns ``(grad_params, grad_inputs)`` where ``grad_inputs`` is (T, K).
    """
    cache = forward_batch(params, [track])
    grads, grad_inputs, _ = backward_batch(params, cache, [scores])
    return grads, grad_inputs[0]


def _block_starts(params):
    return np.array([params.layout[name][0] for name in params.layout], dtype=np.int64)


def loss_and_grads(params, tracks, scores, grad=None):
    """Masked losses and gradients through the fused compiled kernel.

    Numerically the same as :func:`backward_batch` but without per-layer
    Python overhead; used by the training loops.

    Parameters
    ----------
    params : PredictorParams
    tracks : list of (T_n, K) arrays
    scores : (N, M) array, NaN where unobserved
    grad : ndarray, optional
        Flat buffer the summed weight gradient is added to.

    Returns
    -------
    losses : (N,) ndarray
    grad_inputs : list of (T_n, K) arrays
    """
    starts = _block_starts(params)
    if grad is None:
        grad = np.zeros(params.size)
    losses = np.empty(len(tracks))
    grad_inputs = []
    for n, track in enumerate(tracks):
        x = np.ascontiguousarray(_as_track(track, params.n_inputs))
        y, mask = _score_mask(scores[n], params.n_outputs)
        dx = np.empty_like(x)
        loss, _ = _lstm.subject_loss_grad(params.vector, starts, params.hidden,
                                          params.head_width, x, y, mask, grad, dx)
        if not np.isfinite(loss):
            forward_batch(params, [x])   # raises with the offending step
            raise NumericalFailure(f"non-finite loss for sequence {n}")
        losses[n] = loss
        grad_inputs.append(dx)
    return losses, grad_inputs


def predict_scores(params, tracks):
    """Final predictions for a list of tracks, shape (N, M)."""
    cache = forward_batch(params, tracks)
    return np.stack([t.prediction for t in cache.traces])


@dataclass
class AdamState:
    """First/second moment estimates of ADAM for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, x, **kwargs):
        x = np.asarray(x)
        return cls(np.zeros(x.shape), np.zeros(x.shape), **kwargs)


def adam_step(x, grad, state, lr):
    """One bias-corrected ADAM update; ``x`` and ``state`` are modified in place.

    Returns ``x`` for convenience.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.m.shape or np.shape(x) != grad.shape:
        raise ValueError(f"shape mismatch: params {np.shape(x)}, grad {grad.shape}, "
                         f"state {state.m.shape}")
    if not (isinstance(x, np.ndarray) and x.dtype == np.float64 and x.flags.c_contiguous):
        raise ValueError("ADAM updates a contiguous float64 array in place")
    state.step += 1
    _lstm.adam_update(x.reshape(-1), np.ascontiguousarray(grad).reshape(-1), state.m.reshape(-1),
                      state.v.reshape(-1), float(lr), state.beta1, state.beta2, state.eps,
                      1.0 - state.beta1 ** state.step, 1.0 - state.beta2 ** state.step)
    return x


def _clip(grad, clip_norm):
    if clip_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > clip_norm:
        grad = grad * (clip_norm / norm)
    return grad


def train_network(params, tracks, scores, rng, epochs=50, lr=1e-4, lr_decay=0.95,
                  lr_every=5, adam=None, clip_norm=None):
    """Sequential single-subject ADAM training.

    Subjects are visited in a freshly shuffled order each epoch (drawn from
    ``rng``); the rate is ``lr * lr_decay ** (epoch // lr_every)``.

    Parameters
    ----------
    params : PredictorParams
        Updated in place.
    tracks : list of (T_n, K) arrays
    scores : (N, M) array with NaN marking unobserved entries
    rng : numpy.random.Generator
    adam : AdamState, optional
        Moment estimates to continue from; a fresh state when omitted.

    Returns
    -------
    params : PredictorParams
    adam : AdamState
    epoch_losses : ndarray of shape (epochs,)
        Sum over subjects of the loss seen just before each subject's update.
    """
    n = len(tracks)
    if n < 1:
        raise ValueError("need at least one subject to train the network")
    scores = np.asarray(scores, dtype=float).reshape(n, -1)
    if adam is None:
        adam = AdamState.zeros_like(params.vector)
    observed = np.isfinite(scores).any(axis=1)
    if not observed.all():
        warnings.warn(f"{int((~observed).sum())} subject(s) without observed scores "
                      "contribute nothing to training", DataWarning, stacklevel=2)
    xs = [np.ascontiguousarray(_as_track(t, params.n_inputs)) for t in tracks]
    epoch_losses = np.zeros(epochs)
    grad = np.empty(params.size)
    for epoch in range(epochs):
        rate = lr * lr_decay ** (epoch // lr_every)
        for i in rng.permutation(n):
            grad[:] = 0.0
            losses, _ = loss_and_grads(params, [xs[i]], scores[i:i + 1], grad)
            epoch_losses[epoch] += losses[0]
            adam_step(params.vector, _clip(grad, clip_norm), adam, rate)
        if not np.all(np.isfinite(params.vector)):
            raise NumericalFailure(f"non-finite network weights after epoch {epoch}", step=epoch)
    return params, adam, epoch_losses
