"""LSTM, dense and additive (Bahdanau) attention layers on top of :mod:`flowcast.core`.

Sequences are time-major: a batch of ``B`` sequences of length ``T`` with
``d`` features is a ``(T*B) x d`` tensor whose row ``t*B + b`` is step ``t``
of example ``b``.  With ``B = 1`` this is simply the ``T x d`` sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core
from ._kernels import lstm_backward, lstm_forward
from .core import ShapeError, Tensor

GATES = ("f", "i", "o", "c")


@dataclass
class LstmParams:
    W_f: Tensor
    W_i: Tensor
    W_o: Tensor
    W_c: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_c: Tensor
    # optional (4H x (H+d), 4H x 1) arrays already holding the gate blocks in
    # f, i, o, c order, e.g. views of a flat parameter buffer
    stacked: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shape = self.W_f.shape
        if any(getattr(self, f"W_{g}").shape != shape for g in GATES):
            raise ShapeError("LSTM gate weight matrices must share one shape")
        hidden = shape[0]
        if shape[1] <= hidden:
            raise ShapeError(f"LSTM weights {shape} leave no room for inputs")
        if any(getattr(self, f"b_{g}").shape != (hidden, 1) for g in GATES):
            raise ShapeError(f"LSTM biases must be {(hidden, 1)}")

    @property
    def hidden(self) -> int:
        return self.W_f.rows

    @property
    def x_dim(self) -> int:
        return self.W_f.cols - self.W_f.rows

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f"W_{g}") for g in GATES] + [getattr(self, f"b_{g}") for g in GATES]

    def stacked_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self.stacked is not None:
            return self.stacked
        return (np.concatenate([getattr(self, f"W_{g}").data for g in GATES], axis=0),
                np.concatenate([getattr(self, f"b_{g}").data for g in GATES], axis=0))


@dataclass
class AttentionParams:
    W_a: Tensor
    U_a: Tensor
    v: Tensor
    W_c: Tensor

    def __post_init__(self):
        a_dim = self.W_a.rows
        if self.U_a.rows != a_dim or self.v.shape != (a_dim, 1):
            raise ShapeError("W_a, U_a and v must share the alignment dimension")
        if self.W_c.cols != self.W_a.cols + self.U_a.cols:
            raise ShapeError("W_c must act on [context; query]")


@dataclass
class DenseParams:
    W: Tensor
    b: Tensor
    activation: str = "linear"

    def __post_init__(self):
        if self.b.shape != (self.W.rows, 1):
            raise ShapeError(f"dense bias {self.b.shape} does not match W {self.W.shape}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    s = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-s, s, size=(rows, cols))


def lstm_init(rng, x_dim: int, hidden: int) -> dict[str, np.ndarray]:
    out = {f"W_{g}": glorot_uniform(rng, hidden, hidden + x_dim) for g in GATES}
    out.update({f"b_{g}": np.zeros((hidden, 1)) for g in GATES})
    return out


def attention_init(rng, h_dim: int, q_dim: int, a_dim: int, o_dim: int) -> dict[str, np.ndarray]:
    return {
        "W_a": glorot_uniform(rng, a_dim, h_dim),
        "U_a": glorot_uniform(rng, a_dim, q_dim),
        "v": glorot_uniform(rng, a_dim, 1),
        "W_c": glorot_uniform(rng, o_dim, h_dim + q_dim),
    }


def dense_init(rng, n_in: int, n_out: int) -> dict[str, np.ndarray]:
    return {"W": glorot_uniform(rng, n_out, n_in), "b": np.zeros((n_out, 1))}


# ---------------------------------------------------------------------------
# LSTM


def _gate(hx: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return core.add_bias(core.matmul(hx, core.transpose(W)), b)


def lstm_cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
                   p: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step built from primitive tape ops; returns ``(h_t, c_t)``."""
    if x_t.cols != p.x_dim or h_prev.cols != p.hidden or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_cell_step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"incompatible with hidden={p.hidden}, x_dim={p.x_dim}")
    if x_t.rows != h_prev.rows:
        raise ShapeError("lstm_cell_step: batch sizes differ")
    hx = core.concat_cols(h_prev, x_t)
    f = core.sigmoid(_gate(hx, p.W_f, p.b_f))
    i = core.sigmoid(_gate(hx, p.W_i, p.b_i))
    o = core.sigmoid(_gate(hx, p.W_o, p.b_o))
    cand = core.tanh(_gate(hx, p.W_c, p.b_c))
    c_t = core.add(core.mul(f, c_prev), core.mul(i, cand))
    h_t = core.mul(o, core.tanh(c_t))
    return h_t, c_t


def _initial_state(state: Tensor | None, batch: int, hidden: int) -> Tensor:
    if state is None:
        return core.zeros(batch, hidden)
    if state.shape != (batch, hidden):
        raise ShapeError(f"initial state {state.shape}, expected {(batch, hidden)}")
    return state


def lstm_run(seq: Tensor, p: LstmParams, h0: Tensor | None = None, c0: Tensor | None = None,
             batch: int = 1, fused: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Run an LSTM over a time-major sequence.

    Returns ``(hidden_seq, h_T, c_T)`` where ``hidden_seq`` has the same
    time-major layout as ``seq`` with ``p.hidden`` columns.  ``fused`` selects
    the compiled single-op implementation; otherwise the sequence is unrolled
    into primitive ops, one :func:`lstm_cell_step` per time step.
    """
    if seq.rows == 0:
        raise ShapeError("lstm_run: empty sequence")
    if seq.rows % batch:
        raise ShapeError(f"lstm_run: {seq.rows} rows is not a multiple of batch {batch}")
    if seq.cols != p.x_dim:
        raise ShapeError(f"lstm_run: sequence width {seq.cols}, expected {p.x_dim}")
    steps = seq.rows // batch
    h0 = _initial_state(h0, batch, p.hidden)
    c0 = _initial_state(c0, batch, p.hidden)
    if fused:
        return _lstm_fused(seq, p, h0, c0, steps, batch)

    h, c = h0, c0
    outs = []
    for t in range(steps):
        x_t = core.slice_rows(seq, t * batch, (t + 1) * batch) if steps > 1 else seq
        h, c = lstm_cell_step(x_t, h, c, p)
        outs.append(h)
    hidden_seq = core.concat_rows(outs) if steps > 1 else h
    return hidden_seq, h, c


def _lstm_fused(seq, p, h0, c0, steps, batch):
    hidden = p.hidden
    w, bias = p.stacked_arrays()
    xs = np.ascontiguousarray(seq.data)
    h0d = np.ascontiguousarray(h0.data)
    c0d = np.ascontiguousarray(c0.data)
    try:
        hs, cs, tcs, gates = lstm_forward(xs, w, bias, h0d, c0d, steps)
    except FloatingPointError as exc:
        raise core.NonFiniteError(str(exc)) from None
    last = slice(hs.shape[0] - batch, hs.shape[0])

    def bwd(grads):
        g_seq, g_h, g_c = grads
        g_seq = np.zeros_like(hs) if g_seq is None else np.ascontiguousarray(g_seq)
        g_h = np.zeros_like(h0d) if g_h is None else np.ascontiguousarray(g_h)
        g_c = np.zeros_like(c0d) if g_c is None else np.ascontiguousarray(g_c)
        try:
            dw, db, dseq, dh0, dc0 = lstm_backward(g_seq, g_h, g_c, xs, w, h0d, c0d,
                                                  hs, cs, tcs, gates, steps)
        except FloatingPointError as exc:
            raise core.NonFiniteError(str(exc)) from None
        blocks = [slice(k * hidden, (k + 1) * hidden) for k in range(4)]
        return ((dseq,) + tuple(dw[s] for s in blocks) + tuple(db[s] for s in blocks)
                + (dh0, dc0))

    inputs = (seq, p.W_f, p.W_i, p.W_o, p.W_c, p.b_f, p.b_i, p.b_o, p.b_c, h0, c0)
    # finite inputs give finite outputs (the exp argument is clipped) and the
    # backward kernel verifies its own gradients
    out_seq, h_T, c_T = core.custom_op("lstm_sequence", (hs, hs[last], cs[last]), inputs, bwd,
                                       checked=True)
    return out_seq, h_T, c_T


# ---------------------------------------------------------------------------
# Attention and dense layers


def bahdanau_attention(hidden_seq: Tensor, query: Tensor, p: AttentionParams,
                       batch: int = 1) -> tuple[Tensor, Tensor, Tensor]:
    """Additive attention of ``query`` (``B x q``) over a time-major hidden sequence.

    Returns ``(a_t, alpha, context)``: the tanh-projected attention vector
    (``B x o``), the attention weights (``B x T``) and the context (``B x h``).
    """
    if hidden_seq.rows == 0:
        raise ShapeError("bahdanau_attention: empty sequence")
    if hidden_seq.rows % batch or query.rows != batch:
        raise ShapeError(f"bahdanau_attention: batch {batch} does not fit "
                         f"{hidden_seq.shape} / query {query.shape}")
    if hidden_seq.cols != p.W_a.cols or query.cols != p.U_a.cols:
        raise ShapeError(f"bahdanau_attention: hidden {hidden_seq.shape} / query "
                         f"{query.shape} do not match W_a {p.W_a.shape}, U_a {p.U_a.shape}")
    steps, h_dim = hidden_seq.rows // batch, hidden_seq.cols

    keys = core.matmul(hidden_seq, core.transpose(p.W_a))
    q = core.matmul(query, core.transpose(p.U_a))
    if steps > 1:
        q = core.tile_rows(q, steps)
    scores = core.matmul(core.tanh(core.add(keys, q)), p.v)
    scores = core.transpose(core.reshape(scores, steps, batch))
    alpha = core.softmax_row(scores)

    weights = core.reshape(core.transpose(alpha), steps * batch, 1)
    weighted = core.mul_col(hidden_seq, weights)
    context = core.reshape(core.sum_rows(core.reshape(weighted, steps, batch * h_dim)),
                           batch, h_dim)
    a_t = core.tanh(core.matmul(core.concat_cols(context, query), core.transpose(p.W_c)))
    return a_t, alpha, context


_ACTIVATIONS = {
    "linear": lambda x, slope: x,
    "relu": lambda x, slope: core.relu(x),
    "tanh": lambda x, slope: core.tanh(x),
    "leaky_relu": lambda x, slope: core.leaky_relu(x, slope),
}


def dense_forward(x: Tensor, p: DenseParams, slope: float = core.DEFAULT_LEAKY_SLOPE) -> Tensor:
    if x.cols != p.W.cols:
        raise ShapeError(f"dense_forward: input width {x.cols}, weights {p.W.shape}")
    z = core.linear(x, p.W, p.b)
    return _ACTIVATIONS[p.activation](z, slope)
