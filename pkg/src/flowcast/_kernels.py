"""Compiled inner loops: the fused LSTM sequence op and the optimizer update.

Gate blocks are stacked in the order forget, input, output, candidate.  Row
``t * B + b`` of every time-major array holds time step ``t`` of example ``b``.

The forward recurrence spends nearly all of its time in exp/tanh, and libm's
scalar versions do not vectorize, so ``_exp_inplace`` evaluates exp with a
range reduction and a degree-12 Taylor polynomial (max relative error about
1e-15) that LLVM can vectorize.  Callers must pass finite inputs: the
argument clipping would otherwise hide NaN.
"""
import math

import numpy as np
from numba import njit

_INV_LN2 = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_VEC = {"nsz", "arcp", "contract", "afn", "reassoc"}


@njit(cache=True, fastmath=_VEC)
def _exp_inplace(buf, bits):
    n = buf.size
    for j in range(n):
        v = min(max(buf[j], -700.0), 700.0)
        k = math.floor(v * _INV_LN2 + 0.5)
        r = v - k * _LN2_HI - k * _LN2_LO
        buf[j] = 1.0 + r * (1.0 + r * (1.0 / 2 + r * (1.0 / 6 + r * (
            1.0 / 24 + r * (1.0 / 120 + r * (1.0 / 720 + r * (1.0 / 5040 + r * (
                1.0 / 40320 + r * (1.0 / 362880 + r * (1.0 / 3628800 + r * (
                    1.0 / 39916800 + r * (1.0 / 479001600))))))))))))
        bits[j] = (np.int64(k) + 1023) << 52
    scale = bits.view(np.float64)
    for j in range(n):
        buf[j] *= scale[j]


@njit(cache=True, fastmath={"reassoc"})
def all_finite(arr):
    """True when no element is NaN or infinite (x * 0 is 0 only for finite x)."""
    acc = 0.0
    for v in arr.flat:
        acc += v * 0.0
    return acc == 0.0


@njit(cache=True)
def _copy_block(dst, src):
    for r in range(src.shape[0]):
        for j in range(src.shape[1]):
            dst[r, j] = src[r, j]


@njit(cache=True, fastmath=_VEC)
def _recurrence(xproj, wh_t, h0, c0, steps):
    batch, hidden = h0.shape
    width = 4 * hidden
    n_sig = 3 * hidden
    n = steps * batch
    hs = np.empty((n, hidden))
    cs = np.empty((n, hidden))
    tcs = np.empty((n, hidden))
    gates = np.empty((n, width))
    arg_bits = np.empty(batch * width, np.int64)
    carg_bits = np.empty(batch * hidden, np.int64)
    h = h0.copy()
    c = c0.copy()
    for t in range(steps):
        r0 = t * batch
        block = gates[r0:r0 + batch]
        flat = block.reshape(batch * width)
        z = np.dot(h, wh_t)
        # sigmoid(v) = 1 / (1 + exp(-v)); tanh(v) = 1 - 2 / (exp(2v) + 1)
        for b in range(batch):
            for j in range(n_sig):
                block[b, j] = -(z[b, j] + xproj[r0 + b, j])
            for j in range(n_sig, width):
                block[b, j] = 2.0 * (z[b, j] + xproj[r0 + b, j])
        _exp_inplace(flat, arg_bits)
        for b in range(batch):
            for j in range(n_sig):
                block[b, j] = 1.0 / (1.0 + block[b, j])
            for j in range(n_sig, width):
                block[b, j] = 1.0 - 2.0 / (block[b, j] + 1.0)
        cblock = cs[r0:r0 + batch]
        tblock = tcs[r0:r0 + batch]
        for b in range(batch):
            for k in range(hidden):
                cn = block[b, k] * c[b, k] + block[b, hidden + k] * block[b, n_sig + k]
                c[b, k] = cn
                cblock[b, k] = cn
                tblock[b, k] = 2.0 * cn
        _exp_inplace(tblock.reshape(batch * hidden), carg_bits)
        for b in range(batch):
            for k in range(hidden):
                tc = 1.0 - 2.0 / (tblock[b, k] + 1.0)
                tblock[b, k] = tc
                h[b, k] = block[b, 2 * hidden + k] * tc
                hs[r0 + b, k] = h[b, k]
    return hs, cs, tcs, gates


@njit(cache=True)
def lstm_forward(xs, w, bias, h0, c0, steps):
    """Run the recurrence for stacked weights ``w = [W_f; W_i; W_o; W_c]``.

    ``w`` is ``4H x (H + d)`` acting on ``[h_prev, x_t]``; ``bias`` is ``4H x 1``.
    Returns hidden states, cell states, tanh of cell states and gate
    activations, all time-major.
    """
    if not (all_finite(xs) and all_finite(w) and all_finite(bias)
            and all_finite(h0) and all_finite(c0)):
        # the vectorized exp clips its argument and would hide NaN
        raise FloatingPointError("lstm_sequence: non-finite input")
    hidden = h0.shape[1]
    wh_t = np.empty((hidden, w.shape[0]))
    _copy_block(wh_t, w[:, :hidden].T)
    wx_t = np.empty((w.shape[1] - hidden, w.shape[0]))
    _copy_block(wx_t, w[:, hidden:].T)
    xproj = np.dot(xs, wx_t)
    for r in range(xproj.shape[0]):
        for j in range(xproj.shape[1]):
            xproj[r, j] += bias[j, 0]
    return _recurrence(xproj, wh_t, h0, c0, steps)


@njit(cache=True)
def lstm_backward(g_seq, g_h, g_c, xs, w, h0, c0, hs, cs, tcs, gates, steps):
    """Back-propagate through time.

    ``g_seq`` is the gradient on the hidden sequence, ``g_h``/``g_c`` those on
    the final hidden and cell states.  Returns ``(dW, db, dxs, dh0, dc0)``
    with ``dW`` stacked like ``w``.
    """
    batch, hidden = c0.shape
    n = steps * batch
    width = 4 * hidden
    wh = np.empty((width, hidden))
    _copy_block(wh, w[:, :hidden])
    wx = np.empty((width, w.shape[1] - hidden))
    _copy_block(wx, w[:, hidden:])
    dz = np.empty((n, width))
    dh_next = g_h.copy()
    dc = g_c.copy()
    for t in range(steps - 1, -1, -1):
        r0 = t * batch
        for b in range(batch):
            r = r0 + b
            for k in range(hidden):
                f = gates[r, k]
                i = gates[r, hidden + k]
                o = gates[r, 2 * hidden + k]
                g = gates[r, 3 * hidden + k]
                tc = tcs[r, k]
                c_prev = cs[r - batch, k] if t > 0 else c0[b, k]
                dh = g_seq[r, k] + dh_next[b, k]
                dct = dc[b, k] + dh * o * (1.0 - tc * tc)
                dc[b, k] = dct * f
                dz[r, k] = dct * c_prev * f * (1.0 - f)
                dz[r, hidden + k] = dct * g * i * (1.0 - i)
                dz[r, 2 * hidden + k] = dh * tc * o * (1.0 - o)
                dz[r, 3 * hidden + k] = dct * i * (1.0 - g * g)
        dh_next = np.dot(dz[r0:r0 + batch], wh)

    # recurrent weights see h_{t-1}: h0 for the first step, hs afterwards
    dwh = np.dot(dz[:batch].T, h0)
    if steps > 1:
        dwh += np.dot(dz[batch:].T, hs[:n - batch])
    dwx = np.dot(dz.T, xs)
    dw = np.empty(w.shape)
    _copy_block(dw[:, :hidden], dwh)
    _copy_block(dw[:, hidden:], dwx)
    db = np.zeros((width, 1))
    acc = db[:, 0]
    for r in range(n):
        for j in range(width):
            acc[j] += dz[r, j]
    dxs = np.dot(dz, wx)
    if not (all_finite(dw) and all_finite(db) and all_finite(dxs)
            and all_finite(dh_next) and all_finite(dc)):
        raise FloatingPointError("lstm_sequence (backward): non-finite gradient")
    return dw, db, dxs, dh_next, dc


@njit(cache=True)
def adadelta_update(x, g, eg, ed, lr, rho, eps):
    """In-place Adadelta step with a learning-rate multiplier over flat arrays."""
    for j in range(x.size):
        gj = g[j]
        egj = rho * eg[j] + (1.0 - rho) * gj * gj
        delta = -lr * (math.sqrt(ed[j] + eps) / math.sqrt(egj + eps)) * gj
        eg[j] = egj
        ed[j] = rho * ed[j] + (1.0 - rho) * delta * delta
        x[j] += delta
