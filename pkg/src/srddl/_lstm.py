"""Compiled kernels for the score predictor.

Gate layout along the last axis is ``[input, forget, output, cell]``.
Sequences in a batch are right-padded; only the first ``lengths[n]`` steps of
sequence ``n`` are computed and everything past them stays zero.

``lstm_forward``/``lstm_backward`` run only the time loop of one layer and
leave the dense products to the caller. ``subject_loss_grad`` fuses the
whole per-subject forward and backward pass over the flat parameter vector;
it is what the training loops call, since per-subject updates are dominated
by call overhead otherwise.
"""
import numba as nb
import numpy as np


@nb.njit(cache=True)
def _exp_neg_abs(z, scale, out, bits):
    """``out[j] = exp(-scale * |z[j]|)`` to about one ulp.

    libm's scalar exp blocks vectorization of the gate loops; this uses a
    Cody-Waite reduction, a degree-12 Taylor polynomial on
    ``|r| <= ln2 / 2`` and an exponent built in ``bits``.
    """
    fb = bits.view(np.float64)
    for j in range(z.size):
        x = -min(scale * abs(z[j]), 700.0)
        n = np.floor(x * 1.4426950408889634 + 0.5)
        r = x - n * 0.6931471803691238 - n * 1.9082149292705877e-10
        out[j] = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6 + r * (1.0 / 24 + r * (
            1.0 / 120 + r * (1.0 / 720 + r * (1.0 / 5040 + r * (1.0 / 40320 + r * (
                1.0 / 362880 + r * (1.0 / 3628800 + r * (1.0 / 39916800
                                                          + r / 479001600)))))))))))
        bits[j] = (np.int64(n) + 1023) << 52
    for j in range(z.size):
        out[j] *= fb[j]


@nb.njit(cache=True)
def _sigmoid_inplace(z, e, bits):
    _exp_neg_abs(z, 1.0, e, bits)
    for j in range(z.size):
        d = 1.0 / (1.0 + e[j])
        z[j] = d if z[j] >= 0.0 else e[j] * d


@nb.njit(cache=True)
def _tanh_into(z, out, e, bits):
    _exp_neg_abs(z, 2.0, e, bits)
    for j in range(z.size):
        m = (1.0 - e[j]) / (1.0 + e[j])
        out[j] = m if z[j] >= 0.0 else -m


@nb.njit(cache=True)
def lstm_forward(xw, lengths, wh, hs, cs, tcs, gates):
    """Run the recurrence given the projected inputs ``xw = x @ Wx + b``.

    ``tcs`` receives ``tanh(c)`` for reuse by :func:`lstm_backward`.
    """
    nbatch = xw.shape[0]
    hidden = wh.shape[0]
    g4 = 4 * hidden
    h3 = 3 * hidden
    z = np.empty(g4)
    h = np.empty(hidden)
    c = np.empty(hidden)
    tc = np.empty(hidden)
    e = np.empty(g4)
    bits = np.empty(g4, dtype=np.int64)
    hs[:] = 0.0
    cs[:] = 0.0
    tcs[:] = 0.0
    gates[:] = 0.0
    for n in range(nbatch):
        h[:] = 0.0
        c[:] = 0.0
        for t in range(lengths[n]):
            for j in range(g4):
                z[j] = xw[n, t, j]
            if t > 0:
                for i in range(hidden):
                    hi = h[i]
                    for j in range(g4):
                        z[j] += hi * wh[i, j]
            _sigmoid_inplace(z[:h3], e, bits)
            _tanh_into(z[h3:], z[h3:], e, bits)
            for j in range(hidden):
                c[j] = z[hidden + j] * c[j] + z[j] * z[h3 + j]
            _tanh_into(c, tc, e, bits)
            for j in range(hidden):
                h[j] = z[2 * hidden + j] * tc[j]
                hs[n, t, j] = h[j]
                cs[n, t, j] = c[j]
                tcs[n, t, j] = tc[j]
            for j in range(g4):
                gates[n, t, j] = z[j]


@nb.njit(cache=True)
def lstm_backward(lengths, wh_t, cs, tcs, gates, dhs, dz_out):
    """Back-propagate through time; writes pre-activation gate gradients.

    ``dz_out[n, t]`` receives the gradient with respect to the gate
    pre-activations at step ``t``, from which the caller forms all weight
    and input gradients. ``wh_t`` is the transposed recurrent weight
    (4H, H), contiguous so the inner accumulation vectorizes.
    """
    nbatch = dhs.shape[0]
    hidden = wh_t.shape[1]
    g4 = 4 * hidden
    dh_next = np.empty(hidden)
    dc_next = np.empty(hidden)
    dz_out[:] = 0.0
    for n in range(nbatch):
        dh_next[:] = 0.0
        dc_next[:] = 0.0
        for t in range(lengths[n] - 1, -1, -1):
            for j in range(hidden):
                ig = gates[n, t, j]
                fg = gates[n, t, hidden + j]
                og = gates[n, t, 2 * hidden + j]
                gg = gates[n, t, 3 * hidden + j]
                tc = tcs[n, t, j]
                cprev = cs[n, t - 1, j] if t > 0 else 0.0
                dh = dhs[n, t, j] + dh_next[j]
                dc = dc_next[j] + dh * og * (1.0 - tc * tc)
                dz_out[n, t, j] = dc * gg * ig * (1.0 - ig)
                dz_out[n, t, hidden + j] = dc * cprev * fg * (1.0 - fg)
                dz_out[n, t, 2 * hidden + j] = dh * tc * og * (1.0 - og)
                dz_out[n, t, 3 * hidden + j] = dc * ig * (1.0 - gg * gg)
                dc_next[j] = dc * fg
            dh_next[:] = 0.0
            for j in range(g4):
                dzj = dz_out[n, t, j]
                for i in range(hidden):
                    dh_next[i] += wh_t[j, i] * dzj


@nb.njit(cache=True)
def adam_update(x, grad, m, v, lr, beta1, beta2, eps, corr1, corr2):
    """Fused bias-corrected ADAM step; ``corr*`` are ``1 - beta**step``."""
    step = lr / corr1
    inv_sqrt_corr2 = 1.0 / np.sqrt(corr2)
    for i in range(x.size):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * g * g
        m[i] = mi
        v[i] = vi
        x[i] -= step * mi / (np.sqrt(vi) * inv_sqrt_corr2 + eps)


@nb.njit(cache=True)
def _relu_layer(x, w, b):
    out = x @ w
    for t in range(out.shape[0]):
        for j in range(out.shape[1]):
            v = out[t, j] + b[j]
            out[t, j] = v if v > 0.0 else 0.0
    return out


@nb.njit(cache=True)
def _head_forward(theta, s, top, width, n_out):
    """Two ReLU layers and a linear output; ``s`` holds the six block offsets."""
    hidden = top.shape[1]
    w0 = theta[s[0]:s[0] + hidden * width].reshape(hidden, width)
    w1 = theta[s[2]:s[2] + width * width].reshape(width, width)
    w2 = theta[s[4]:s[4] + width * n_out].reshape(width, n_out)
    a0 = _relu_layer(top, w0, theta[s[1]:s[1] + width])
    a1 = _relu_layer(a0, w1, theta[s[3]:s[3] + width])
    out = a1 @ w2
    b2 = theta[s[5]:s[5] + n_out]
    for t in range(out.shape[0]):
        for j in range(n_out):
            out[t, j] += b2[j]
    return a0, a1, out


@nb.njit(cache=True)
def _add_outer(g, a, d):
    """``g += a.T @ d`` written into a flat gradient block."""
    g += (a.T @ d).ravel()


@nb.njit(cache=True)
def _head_backward(theta, grad, s, top, a0, a1, dout, width):
    hidden = top.shape[1]
    n_out = dout.shape[1]
    w1 = theta[s[2]:s[2] + width * width].reshape(width, width)
    w2 = theta[s[4]:s[4] + width * n_out].reshape(width, n_out)
    w0 = theta[s[0]:s[0] + hidden * width].reshape(hidden, width)
    _add_outer(grad[s[4]:s[4] + width * n_out], a1, dout)
    grad[s[5]:s[5] + n_out] += dout.sum(axis=0)
    dz1 = dout @ w2.T
    for t in range(dz1.shape[0]):
        for j in range(width):
            if a1[t, j] <= 0.0:
                dz1[t, j] = 0.0
    _add_outer(grad[s[2]:s[2] + width * width], a0, dz1)
    grad[s[3]:s[3] + width] += dz1.sum(axis=0)
    dz0 = dz1 @ w1.T
    for t in range(dz0.shape[0]):
        for j in range(width):
            if a0[t, j] <= 0.0:
                dz0[t, j] = 0.0
    _add_outer(grad[s[0]:s[0] + hidden * width], top, dz0)
    grad[s[1]:s[1] + width] += dz0.sum(axis=0)
    return dz0 @ w0.T


@nb.njit(cache=True)
def subject_loss_grad(theta, starts, hidden, width, x, y, mask, grad, dx):
    """Masked squared error of one subject and its gradients.

    ``starts`` lists the offsets of the parameter blocks in layout order:
    three per LSTM layer (wx, wh, b) followed by six per head. The weight
    gradient is added to ``grad``; ``dx`` (T, K) is overwritten with the
    input gradient. Returns ``(loss, prediction)``; a non-finite loss means
    the caller should rerun the checked path to locate the failure.
    """
    n_layers = (starts.size - 12) // 3
    steps, n_in = x.shape
    n_out = y.size
    g4 = 4 * hidden
    lengths = np.full(1, steps, dtype=np.int64)
    inputs = []
    hss = []
    css = []
    tcss = []
    gatess = []
    inp = x
    for layer in range(n_layers):
        fan = n_in if layer == 0 else hidden
        o = starts[3 * layer:3 * layer + 3]
        wx = theta[o[0]:o[0] + fan * g4].reshape(fan, g4)
        wh = theta[o[1]:o[1] + hidden * g4].reshape(hidden, g4)
        xw = inp @ wx
        b = theta[o[2]:o[2] + g4]
        for t in range(steps):
            for j in range(g4):
                xw[t, j] += b[j]
        hs = np.empty((1, steps, hidden))
        cs = np.empty((1, steps, hidden))
        tcs = np.empty((1, steps, hidden))
        gates = np.empty((1, steps, g4))
        lstm_forward(xw.reshape(1, steps, g4), lengths, wh, hs, cs, tcs, gates)
        inputs.append(inp)
        hss.append(hs)
        css.append(cs)
        tcss.append(tcs)
        gatess.append(gates)
        inp = hs[0]
    top = inp
    sp = starts[3 * n_layers:3 * n_layers + 6]
    sa = starts[3 * n_layers + 6:3 * n_layers + 12]
    p0, p1, step_pred = _head_forward(theta, sp, top, width, n_out)
    q0, q1, logit2 = _head_forward(theta, sa, top, width, 1)

    peak = logit2[0, 0]
    for t in range(1, steps):
        peak = max(peak, logit2[t, 0])
    att = np.empty(steps)
    total = 0.0
    for t in range(steps):
        att[t] = np.exp(logit2[t, 0] - peak)
        total += att[t]
    att /= total
    pred = att @ step_pred
    loss = 0.0
    dy = np.zeros(n_out)
    for j in range(n_out):
        if mask[j]:
            e = pred[j] - y[j]
            loss += e * e
            dy[j] = 2.0 * e
    if not np.isfinite(loss):
        return loss, pred

    d_step = np.empty((steps, n_out))
    da = step_pred @ dy
    mean_da = att @ da
    d_logit = np.empty((steps, 1))
    for t in range(steps):
        for j in range(n_out):
            d_step[t, j] = att[t] * dy[j]
        d_logit[t, 0] = att[t] * (da[t] - mean_da)
    dtop = _head_backward(theta, grad, sp, top, p0, p1, d_step, width)
    dtop += _head_backward(theta, grad, sa, top, q0, q1, d_logit, width)

    dhs = dtop.reshape(1, steps, hidden)
    dz = np.empty((1, steps, g4))
    for layer in range(n_layers - 1, -1, -1):
        fan = n_in if layer == 0 else hidden
        o = starts[3 * layer:3 * layer + 3]
        wx = theta[o[0]:o[0] + fan * g4].reshape(fan, g4)
        wh = theta[o[1]:o[1] + hidden * g4].reshape(hidden, g4)
        lstm_backward(lengths, np.ascontiguousarray(wh.T), css[layer], tcss[layer], gatess[layer],
                      dhs, dz)
        flat_dz = dz[0]
        hprev = np.zeros((steps, hidden))
        hprev[1:] = hss[layer][0, :steps - 1]
        _add_outer(grad[o[0]:o[0] + fan * g4], inputs[layer], flat_dz)
        _add_outer(grad[o[1]:o[1] + hidden * g4], hprev, flat_dz)
        grad[o[2]:o[2] + g4] += flat_dz.sum(axis=0)
        dhs = (flat_dz @ wx.T).reshape(1, steps, fan)
    dx[:, :] = dhs[0]
    return loss, pred
