"""MSE training with Adadelta, best-validation snapshot selection and grid search."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import core
from ._kernels import adadelta_update
from .core import ShapeError, Tape, Tensor
from .data import WindowedDataset
from .models import Model, ModelConfig, ModelVariant, ParamStore, build


class TrainingError(RuntimeError):
    """Training cannot proceed (empty split, diverged loss)."""


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 15
    learning_rate: float = 0.1
    rho: float = 0.95
    epsilon: float = 1e-7
    seed: int = 0
    shuffle_train: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be non-negative")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.val_loss)

    @property
    def best_epoch(self) -> int:
        """1-based epoch with the lowest validation loss (earliest on ties)."""
        if not self.val_loss:
            raise ValueError("empty history")
        return int(np.argmin(self.val_loss)) + 1

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                fh.write(f"{e},{tr!r},{va!r}\n")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element (horizons and batch)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    return core.mean_all(core.square(core.sub(pred, target)))


def adadelta_step(params: ParamStore, lr: float, rho: float = 0.95, eps: float = 1e-7) -> None:
    """One Adadelta update of every parameter, scaled by a learning-rate multiplier.

    E[g^2] <- rho E[g^2] + (1-rho) g^2
    dx     <- -lr * sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
    x      <- x + dx
    """
    adadelta_update(params.flat, params.grad_vector(), params.acc_grad, params.acc_delta,
                    float(lr), float(rho), float(eps))


def _split_tensors(ds: WindowedDataset, split: str, merged: bool):
    x, dx, y = ds.arrays(split)
    if len(y) == 0:
        raise TrainingError(f"{split} split is empty")
    return x, (dx if merged else None), y


EVAL_CHUNK = 64  # keeps the LSTM state arrays in L2


def predict_split(model: Model, x: np.ndarray, dx: np.ndarray | None,
                  chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Normalized predictions for many windows, in cache-sized chunks."""
    out = np.empty((x.shape[0], model.cfg.lead))
    for a in range(0, x.shape[0], chunk):
        b = a + chunk
        pred = model.forward(Tensor(x[a:b]), None if dx is None else Tensor(dx[a:b]))
        out[a:b] = pred.data
    return out


def evaluate_loss(model: Model, x: np.ndarray, dx: np.ndarray | None, y: np.ndarray) -> float:
    """Normalized MSE of ``model`` over a whole split."""
    return float(np.mean((predict_split(model, x, dx) - y) ** 2))


def train(model: Model, ds: WindowedDataset, cfg: TrainConfig,
          log_path: str | Path | None = None) -> tuple[Model, TrainHistory]:
    """Fit ``model`` in place and leave it at its best-validation parameters.

    Each epoch visits the training split in a seeded random order (indices
    are sorted inside each mini-batch, so only batch membership and order
    depend on the shuffle); the last short batch is kept.  Validation loss on
    the full validation split follows every epoch.
    """
    merged = model.variant.merged
    x_tr, dx_tr, y_tr = _split_tensors(ds, "train", merged)
    x_va, dx_va, y_va = _split_tensors(ds, "val", merged)
    n = len(y_tr)
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    params.acc_grad[...] = 0.0
    params.acc_delta[...] = 0.0
    history = TrainHistory()
    best, best_flat = math.inf, params.snapshot()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle_train else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            try:
                with Tape() as tape:
                    pred = model.forward(Tensor(x_tr[idx]),
                                         None if dx_tr is None else Tensor(dx_tr[idx]))
                    loss = mse_loss(pred, Tensor(y_tr[idx]))
                tape.backward(loss)
            except core.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, batch starting at {start}: {exc}") from exc
            adadelta_step(params, cfg.learning_rate, cfg.rho, cfg.epsilon)
            total += loss.item() * len(idx)
        try:
            val = evaluate_loss(model, x_va, dx_va, y_va)
        except core.NonFiniteError as exc:
            raise TrainingError(f"epoch {epoch}: validation diverged: {exc}") from exc
        if not math.isfinite(val):
            raise TrainingError(f"epoch {epoch}: validation loss is {val}")
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        if val < best:
            best, best_flat = val, params.snapshot()

    params.restore(best_flat)
    params.zero_grad()
    model.trained = True
    if log_path is not None:
        history.write_csv(log_path)
    return model, history


# ---------------------------------------------------------------------------
# Grid search

DEFAULT_LEARNING_RATES = (0.01, 0.1, 1.0)
DEFAULT_BATCH_SIZES = (15, 20, 32)


@dataclass
class GridCell:
    learning_rate: float
    batch_size: int
    min_val_loss: float
    best_epoch: int


@dataclass
class GridResult:
    variant: ModelVariant
    cells: list[GridCell]
    best: GridCell
    best_params: np.ndarray = field(repr=False)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("model,batch_size,learning_rate,min_val_loss\n")
            for c in self.cells:
                fh.write(f"{self.variant.value},{c.batch_size},{c.learning_rate!r},"
                         f"{c.min_val_loss!r}\n")


def select_best(cells: list[GridCell]) -> GridCell:
    """Lowest validation loss; ties go to the smaller batch, then the smaller rate."""
    if not cells:
        raise ValueError("empty grid")
    return min(cells, key=lambda c: (c.min_val_loss, c.batch_size, c.learning_rate))


def _run_cell(args):
    variant, model_cfg, train_cfg, ds = args
    model, hist = train(build(variant, model_cfg), ds, train_cfg)
    cell = GridCell(train_cfg.learning_rate, train_cfg.batch_size,
                    hist.best_val_loss, hist.best_epoch)
    return cell, model.params.snapshot()


def grid_search(variant: ModelVariant | str, ds: WindowedDataset, model_cfg: ModelConfig,
                train_cfg: TrainConfig, learning_rates=DEFAULT_LEARNING_RATES,
                batch_sizes=DEFAULT_BATCH_SIZES, workers: int = 1) -> GridResult:
    """Train one model per (batch size, learning rate) cell from the same initialization."""
    variant = ModelVariant(variant)
    if not learning_rates or not batch_sizes:
        raise ValueError("grid must contain at least one learning rate and one batch size")
    jobs = [(variant, model_cfg, replace(train_cfg, learning_rate=float(lr), batch_size=int(bs)), ds)
            for bs in batch_sizes for lr in learning_rates]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    cells = [c for c, _ in results]
    best = select_best(cells)
    return GridResult(variant, cells, best, results[cells.index(best)][1])
