"""Slow reference implementations used as independent test oracles."""
import math

import numpy as np

from flowcast import layers
from flowcast.layers import AttentionParams, LstmParams


def time_major(batch_seq):
    """(B, T, d) -> (T*B) x d with row t*B + b."""
    b, t, d = batch_seq.shape
    return batch_seq.transpose(1, 0, 2).reshape(t * b, d)


def scalar_lstm(xs, p: LstmParams, h0=None, c0=None):
    """One example, plain Python floats: xs is a list of input vectors."""
    H = p.hidden
    W = {g: getattr(p, f"W_{g}").data for g in layers.GATES}
    b = {g: getattr(p, f"b_{g}").data[:, 0] for g in layers.GATES}
    h = [0.0] * H if h0 is None else list(h0)
    c = [0.0] * H if c0 is None else list(c0)
    sig = lambda u: 1.0 / (1.0 + math.exp(-u))
    hs = []
    for x in xs:
        hx = h + list(x)
        z = {g: [b[g][j] + sum(W[g][j, k] * hx[k] for k in range(len(hx))) for j in range(H)]
             for g in layers.GATES}
        c = [sig(z["f"][j]) * c[j] + sig(z["i"][j]) * math.tanh(z["c"][j]) for j in range(H)]
        h = [sig(z["o"][j]) * math.tanh(c[j]) for j in range(H)]
        hs.append(h)
    return np.array(hs), np.array(h), np.array(c)


def scalar_attention(hs, query, p: AttentionParams):
    """One example: hs is T x h, query is a q-vector."""
    Wa, Ua, v, Wc = (p.W_a.data, p.U_a.data, p.v.data[:, 0], p.W_c.data)
    uq = Ua @ query
    scores = np.array([sum(v[k] * math.tanh((Wa @ h)[k] + uq[k]) for k in range(len(v)))
                       for h in hs])
    e = [math.exp(s) for s in scores]
    alpha = np.array([u / sum(e) for u in e])
    context = sum(alpha[t] * hs[t] for t in range(len(hs)))
    a = np.tanh(Wc @ np.concatenate([context, query]))
    return a, alpha, context


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def scalar_model(model, x, dx=None):
    """Per-example forward pass composed from the scalar layer oracles."""
    cfg, p = model.cfg, model.params
    out = []
    for b in range(x.shape[0]):
        feats = []
        for branch, window in zip(model.variant.branches, (x[b], None if dx is None else dx[b])):
            h1, _, _ = scalar_lstm(window[:, None], model.lstm(branch, 1))
            h2, h_last, _ = scalar_lstm(h1, model.lstm(branch, 2))
            rep = h_last
            if model.variant.has_attention(branch):
                a_t, _, context = scalar_attention(h2, h_last, model.attention(branch))
                rep = a_t if cfg.attn_projection else context
            W, bias = p[f"{branch}.dense.W"].data, p[f"{branch}.dense.b"].data[:, 0]
            feats.append(_leaky(W @ rep + bias, cfg.leaky_slope))
        head = model.head_name
        z = p[f"{head}.W"].data @ np.concatenate(feats) + p[f"{head}.b"].data[:, 0]
        hidden = _leaky(z, cfg.leaky_slope)
        out.append(p["output.W"].data @ hidden + p["output.b"].data[:, 0])
    return np.array(out)
