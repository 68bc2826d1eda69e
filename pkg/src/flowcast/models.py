"""The five forecaster variants, their parameter store and on-disk format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import core, layers
from .core import ShapeError, Tensor
from .layers import AttentionParams, DenseParams, LstmParams

FORMAT_MAGIC = b"FLOWCAST-MODEL\n"
FORMAT_VERSION = 1


class ModelVariant(str, Enum):
    LSTM = "LSTM"
    LSTM_ATTN = "LSTM_ATTN"
    MERGED = "MERGED"
    MERGED_ATTN_FLOW = "MERGED_ATTN_FLOW"
    MERGED_ATTN_BOTH = "MERGED_ATTN_BOTH"

    @property
    def merged(self) -> bool:
        return self.value.startswith("MERGED")

    @property
    def attn_flow(self) -> bool:
        return self in (ModelVariant.LSTM_ATTN, ModelVariant.MERGED_ATTN_FLOW,
                        ModelVariant.MERGED_ATTN_BOTH)

    @property
    def attn_fluct(self) -> bool:
        return self is ModelVariant.MERGED_ATTN_BOTH

    @property
    def branches(self) -> tuple[str, ...]:
        return ("flow", "fluct") if self.merged else ("flow",)

    def has_attention(self, branch: str) -> bool:
        return self.attn_flow if branch == "flow" else self.attn_fluct


@dataclass
class ModelConfig:
    lag: int = 20
    lead: int = 5
    lstm1_units: int = 25
    lstm2_units: int = 15
    branch_dense_units: int = 15
    fusion_dense_units: int = 10
    leaky_slope: float = core.DEFAULT_LEAKY_SLOPE
    attn_dim: int = 0        # 0 -> lstm2_units
    attn_out_dim: int = 0    # 0 -> lstm2_units
    attn_projection: bool = True  # False: the context vector is used directly
    seed: int = 0

    def __post_init__(self):
        for name in ("lag", "lead", "lstm1_units", "lstm2_units",
                     "branch_dense_units", "fusion_dense_units"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.attn_dim < 0 or self.attn_out_dim < 0:
            raise ValueError("attention dimensions must be non-negative")

    @property
    def a_dim(self) -> int:
        return self.attn_dim or self.lstm2_units

    @property
    def o_dim(self) -> int:
        return self.attn_out_dim or self.lstm2_units

    def attention_width(self) -> int:
        """Width of the vector an attention block hands to the branch dense layer."""
        return self.o_dim if self.attn_projection else self.lstm2_units


class ParamStore:
    """Named parameters living in one flat buffer, plus Adadelta accumulators.

    Each tensor's ``data`` is a view into :attr:`flat`, so optimizers can
    update every parameter with a handful of vector operations.
    """

    def __init__(self, arrays: dict[str, np.ndarray]):
        total = sum(int(np.size(a)) for a in arrays.values())
        self.flat = np.empty(total)
        self.acc_grad = np.zeros(total)    # E[g^2]
        self.acc_delta = np.zeros(total)   # E[dx^2]
        self._tensors: dict[str, Tensor] = {}
        self._slices: dict[str, slice] = {}
        off = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2:
                raise ShapeError(f"parameter {name} must be 2-D, got {arr.shape}")
            if name in self._tensors:
                raise KeyError(f"duplicate parameter {name}")
            sl = slice(off, off + arr.size)
            view = self.flat[sl].reshape(arr.shape)
            view[...] = arr
            self._tensors[name] = Tensor(view, requires_grad=True, name=name)
            self._slices[name] = sl
            off += arr.size

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    @property
    def size(self) -> int:
        return self.flat.size

    def accumulators(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        sl, shape = self._slices[name], self._tensors[name].shape
        return self.acc_grad[sl].reshape(shape), self.acc_delta[sl].reshape(shape)

    def span(self, first: str, last: str) -> np.ndarray:
        """Flat view covering every parameter from ``first`` through ``last``."""
        return self.flat[self._slices[first].start:self._slices[last].stop]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grad_vector(self) -> np.ndarray:
        missing = [n for n, t in self._tensors.items() if t.grad is None]
        if missing:
            raise ValueError(f"missing gradients for {', '.join(missing[:5])}"
                             + (" ..." if len(missing) > 5 else ""))
        return np.concatenate([t.grad.ravel() for t in self._tensors.values()])

    def snapshot(self) -> np.ndarray:
        return self.flat.copy()

    def restore(self, flat: np.ndarray) -> None:
        if flat.shape != self.flat.shape:
            raise ShapeError("snapshot does not match this parameter store")
        self.flat[...] = flat


class Model:
    """A built forecaster: variant + config + parameters."""

    def __init__(self, variant: ModelVariant, cfg: ModelConfig, params: ParamStore):
        self.variant = ModelVariant(variant)
        self.cfg = cfg
        self.params = params
        self.trained = False
        self.fused = True  # compiled LSTM op; False unrolls into primitive ops
        # parameter tensors are fixed views of params.flat, so grouped views can be reused
        self._views: dict = {}

    # -- parameter views -------------------------------------------------
    def _cached(self, key, make):
        view = self._views.get(key)
        if view is None:
            view = self._views[key] = make()
        return view

    def lstm(self, branch: str, layer: int) -> LstmParams:
        return self._cached(("lstm", branch, layer), lambda: self._lstm(branch, layer))

    def _lstm(self, branch: str, layer: int) -> LstmParams:
        pre = f"{branch}.lstm{layer}."
        p = LstmParams(**{g: self.params[pre + g] for g in
                          ("W_f", "W_i", "W_o", "W_c", "b_f", "b_i", "b_o", "b_c")})
        # gate blocks are stored back to back, so the stacked matrices are views
        rows, cols = p.W_f.shape
        p.stacked = (self.params.span(pre + "W_f", pre + "W_c").reshape(4 * rows, cols),
                     self.params.span(pre + "b_f", pre + "b_c").reshape(4 * rows, 1))
        return p

    def attention(self, branch: str) -> AttentionParams:
        return self._cached(("attn", branch), lambda: self._attention(branch))

    def _attention(self, branch: str) -> AttentionParams:
        pre = f"{branch}.attn."
        if self.cfg.attn_projection:
            w_c = self.params[pre + "W_c"]
        else:
            # no trainable projection; the attention vector computed from this
            # constant is discarded in favour of the context
            w_c = Tensor(np.zeros((self.cfg.o_dim, 2 * self.cfg.lstm2_units)))
        return AttentionParams(self.params[pre + "W_a"], self.params[pre + "U_a"],
                               self.params[pre + "v"], w_c)

    def dense(self, prefix: str, activation: str) -> DenseParams:
        return self._cached(("dense", prefix, activation), lambda: DenseParams(
            self.params[prefix + ".W"], self.params[prefix + ".b"], activation))

    @property
    def head_name(self) -> str:
        return "fusion" if self.variant.merged else "hidden"

    # -- forward -----------------------------------------------------------
    def encode(self, branch: str, window: Tensor, capture: dict | None = None) -> Tensor:
        """Branch stack: LSTM -> LSTM -> [attention] -> Dense(LeakyReLU)."""
        batch, lag = window.shape
        if lag != self.cfg.lag:
            raise ShapeError(f"{branch} window has {lag} steps, model expects {self.cfg.lag}")
        seq = core.reshape(core.transpose(window), lag * batch, 1)
        h1, _, _ = layers.lstm_run(seq, self.lstm(branch, 1), batch=batch, fused=self.fused)
        h2, h_last, _ = layers.lstm_run(h1, self.lstm(branch, 2), batch=batch, fused=self.fused)
        rep = h_last
        if self.variant.has_attention(branch):
            a_t, alpha, context = layers.bahdanau_attention(h2, h_last, self.attention(branch),
                                                            batch=batch)
            rep = a_t if self.cfg.attn_projection else context
            if capture is not None:
                capture[f"{branch}.alpha"] = alpha
        feat = layers.dense_forward(rep, self.dense(f"{branch}.dense", "leaky_relu"),
                                    self.cfg.leaky_slope)
        if capture is not None:
            capture[branch] = feat
        return feat

    def forward(self, x: Tensor, dx: Tensor | None = None,
                capture: dict | None = None) -> Tensor:
        """Batched prediction: ``x``/``dx`` are ``B x lag``, the result ``B x lead``."""
        if self.variant.merged and dx is None:
            raise ValueError(f"{self.variant.value} needs the fluctuation window")
        if not self.variant.merged and dx is not None:
            raise ValueError(f"{self.variant.value} takes no fluctuation window")
        if dx is not None and dx.shape != x.shape:
            raise ShapeError(f"flow window {x.shape} and fluctuation window {dx.shape} differ")
        flow = self.encode("flow", x, capture)
        if self.variant.merged:
            fluct = self.encode("fluct", dx, capture)
            hidden = fuse(flow, fluct, self.dense("fusion", "leaky_relu"), self.cfg.leaky_slope)
        else:
            hidden = layers.dense_forward(flow, self.dense("hidden", "leaky_relu"),
                                          self.cfg.leaky_slope)
        return layers.dense_forward(hidden, self.dense("output", "linear"))


def fuse(branch_flow: Tensor, branch_fluct: Tensor, p: DenseParams,
         slope: float = core.DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Concatenate the branch features and apply the fusion layer.

    The learned fusion weights play the role of the trend/fluctuation mixing
    coefficients; there are no separate scalar weights.
    """
    if branch_flow.rows != branch_fluct.rows:
        raise ShapeError(f"branch outputs {branch_flow.shape} / {branch_fluct.shape} differ in batch")
    return layers.dense_forward(core.concat_cols(branch_flow, branch_fluct), p, slope)


def parameter_shapes(variant: ModelVariant, cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """Ordered parameter names and shapes for a variant (no values)."""
    variant = ModelVariant(variant)
    shapes: dict[str, tuple[int, int]] = {}
    h1, h2 = cfg.lstm1_units, cfg.lstm2_units

    def lstm(pre, x_dim, hidden):
        for g in layers.GATES:
            shapes[f"{pre}.W_{g}"] = (hidden, hidden + x_dim)
        for g in layers.GATES:
            shapes[f"{pre}.b_{g}"] = (hidden, 1)

    def dense(pre, n_in, n_out):
        shapes[f"{pre}.W"] = (n_out, n_in)
        shapes[f"{pre}.b"] = (n_out, 1)

    for branch in variant.branches:
        lstm(f"{branch}.lstm1", 1, h1)
        lstm(f"{branch}.lstm2", h1, h2)
        width = h2
        if variant.has_attention(branch):
            a = cfg.a_dim
            shapes[f"{branch}.attn.W_a"] = (a, h2)
            shapes[f"{branch}.attn.U_a"] = (a, h2)
            shapes[f"{branch}.attn.v"] = (a, 1)
            if cfg.attn_projection:
                shapes[f"{branch}.attn.W_c"] = (cfg.o_dim, 2 * h2)
            width = cfg.attention_width()
        dense(f"{branch}.dense", width, cfg.branch_dense_units)
    head_in = cfg.branch_dense_units * len(variant.branches)
    dense("fusion" if variant.merged else "hidden", head_in, cfg.fusion_dense_units)
    dense("output", cfg.fusion_dense_units, cfg.lead)
    return shapes


def build(variant: ModelVariant | str, cfg: ModelConfig | None = None) -> Model:
    """Create a freshly initialized model (Glorot-uniform weights, zero biases)."""
    cfg = cfg or ModelConfig()
    variant = ModelVariant(variant)
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    for name, (rows, cols) in parameter_shapes(variant, cfg).items():
        if name.rsplit(".", 1)[1].startswith("b"):
            arrays[name] = np.zeros((rows, cols))
        else:
            arrays[name] = layers.glorot_uniform(rng, rows, cols)
    return Model(variant, cfg, ParamStore(arrays))


def predict(model: Model, x_window, dx_window=None) -> Tensor:
    """Forward pass without gradient tracking.

    Windows may be a single window (``lag``, ``lag x 1`` or ``1 x lag``) or a
    batch ``B x lag``; the result is ``B x lead`` in normalized units.
    """
    x = _as_batch(x_window, model.cfg.lag)
    dx = None if dx_window is None else _as_batch(dx_window, model.cfg.lag)
    return model.forward(x, dx)


def _as_batch(window, lag: int) -> Tensor:
    arr = window.data if isinstance(window, Tensor) else np.asarray(window, dtype=np.float64)
    if arr.ndim == 1 or (arr.ndim == 2 and arr.shape == (lag, 1) and lag != 1):
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != lag:
        raise ShapeError(f"window shape {arr.shape} does not fit lag {lag}")
    return Tensor(arr)


# ---------------------------------------------------------------------------
# Serialization: magic line, one JSON header line, raw little-endian float64.


def save_model(model: Model, path: str | Path) -> None:
    names = model.params.names()
    header = {
        "version": FORMAT_VERSION,
        "variant": model.variant.value,
        "config": asdict(model.cfg),
        "seed": model.cfg.seed,
        "trained": model.trained,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(model.params.flat.astype("<f8").tobytes())


def load_model(path: str | Path) -> Model:
    with open(path, "rb") as fh:
        if fh.readline() != FORMAT_MAGIC:
            raise ValueError(f"{path} is not a flowcast model file")
        header = json.loads(fh.readline())
        payload = fh.read()
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {header.get('version')}")
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in header["config"].items() if k in known})
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, off = {}, 0
    for entry in header["params"]:
        rows, cols = entry["shape"]
        arrays[entry["name"]] = values[off:off + rows * cols].reshape(rows, cols)
        off += rows * cols
    if off != values.size:
        raise ValueError(f"{path}: payload holds {values.size} values, header describes {off}")
    expected = parameter_shapes(header["variant"], cfg)
    if {n: tuple(a.shape) for n, a in arrays.items()} != expected:
        raise ValueError(f"{path}: parameters do not match the {header['variant']} layout")
    model = build(header["variant"], cfg)
    model.params.restore(np.concatenate([arrays[n].ravel() for n in model.params.names()]))
    model.trained = bool(header.get("trained", False))
    return model
