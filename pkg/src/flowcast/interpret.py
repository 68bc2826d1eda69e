"""Model inspection: input-gradient saliency, branch features, branch separability."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import core
from .core import Tape, Tensor
from .data import format_timestamp
from .models import Model
from .training import EVAL_CHUNK


class UntrainedModelError(RuntimeError):
    """Inspection was requested for a model that has not been trained or loaded."""


@dataclass
class SaliencyMap:
    """Row-normalized absolute input gradients for one input feature.

    Gradients are taken in the normalized input space.  Each row is divided
    by its maximum; all-zero rows stay zero.
    """

    feature: str
    horizons: tuple[int, ...]
    values: np.ndarray          # windows x lag
    raw: np.ndarray             # |d output / d input| before normalization
    times: np.ndarray | None = None


def normalize_rows(a: np.ndarray) -> np.ndarray:
    peak = a.max(axis=1, keepdims=True)
    out = a.copy()
    nz = peak[:, 0] > 0
    out[nz] = a[nz] / peak[nz]
    return out


def input_gradients(forward: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    horizons: Sequence[int]) -> list[np.ndarray]:
    """Gradient of the summed 1-based ``horizons`` outputs w.r.t. each input.

    ``forward`` maps batch tensors (one per entry of ``inputs``) to a
    ``B x lead`` tensor.  Examples do not interact, so one backward pass over
    the batch yields every per-window gradient.
    """
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    with Tape() as tape:
        out = forward(*tensors)
        cols = [h - 1 for h in horizons]
        if min(cols) < 0 or max(cols) >= out.cols:
            raise ValueError(f"horizons {tuple(horizons)} outside 1..{out.cols}")
        selector = np.zeros((out.cols, 1))
        selector[cols] = 1.0
        total = core.sum_all(core.matmul(out, Tensor(selector)))
    tape.backward(total)
    return [np.zeros_like(a) if t.grad is None else np.array(t.grad) for a, t in zip(inputs, tensors)]


def _require_trained(model: Model) -> None:
    if not model.trained:
        raise UntrainedModelError("saliency needs a trained (or loaded trained) model")


def input_saliency(model: Model, x: np.ndarray, dx: np.ndarray | None = None,
                   horizons: Sequence[int] | None = None, per_horizon: bool = True,
                   times: np.ndarray | None = None) -> list[SaliencyMap]:
    """Saliency maps for a batch of normalized windows.

    With ``per_horizon`` (the default) every horizon in ``horizons`` gets its
    own maps; otherwise the selected horizons are summed into one target.
    Merged variants yield a flow and a fluctuation map per target.
    """
    _require_trained(model)
    lead = model.cfg.lead
    horizons = tuple(range(1, lead + 1)) if horizons is None else tuple(horizons)
    groups = [(h,) for h in horizons] if per_horizon else [horizons]
    merged = model.variant.merged
    if merged and dx is None:
        raise ValueError(f"{model.variant.value} needs fluctuation windows")
    inputs = [np.asarray(x, dtype=np.float64)]
    if merged:
        inputs.append(np.asarray(dx, dtype=np.float64))
    names = ["flow", "fluct"][:len(inputs)]

    maps = []
    for group in groups:
        grads = [np.empty_like(a) for a in inputs]
        for a in range(0, inputs[0].shape[0], EVAL_CHUNK):
            chunk = [arr[a:a + EVAL_CHUNK] for arr in inputs]
            for full, g in zip(grads, input_gradients(model.forward, chunk, group)):
                full[a:a + EVAL_CHUNK] = g
        for name, g in zip(names, grads):
            raw = np.abs(g)
            maps.append(SaliencyMap(name, group, normalize_rows(raw), raw, times))
    return maps


def extract_features(model: Model, x: np.ndarray, dx: np.ndarray) -> dict[str, np.ndarray]:
    """Branch dense outputs right before concatenation, ``windows x units`` per branch."""
    if not model.variant.merged:
        raise ValueError(f"{model.variant.value} has a single branch and no concatenation point")
    parts: dict[str, list[np.ndarray]] = {"flow": [], "fluct": []}
    for a in range(0, x.shape[0], EVAL_CHUNK):
        capture: dict = {}
        model.forward(Tensor(x[a:a + EVAL_CHUNK]), Tensor(dx[a:a + EVAL_CHUNK]), capture=capture)
        for branch in parts:
            parts[branch].append(capture[branch].data)
    return {b: np.concatenate(p, axis=0) for b, p in parts.items()}


def silhouette(points: np.ndarray, labels: np.ndarray, chunk: int = 512) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points in singleton clusters score 0, as do points whose intra- and
    inter-cluster mean distances are both zero.  Distances are computed in
    row blocks so memory stays linear in the number of points.
    """
    points = np.asarray(points, dtype=np.float64)
    uniq, codes = np.unique(np.asarray(labels), return_inverse=True)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    onehot = np.zeros((len(points), uniq.size))
    onehot[np.arange(len(points)), codes] = 1.0
    sizes = onehot.sum(axis=0)
    scores = np.zeros(len(points))
    for a in range(0, len(points), chunk):
        sums = cdist(points[a:a + chunk], points) @ onehot        # rows x clusters
        own = codes[a:a + chunk]
        rows = np.arange(sums.shape[0])
        n_own = sizes[own] - 1
        intra = np.divide(sums[rows, own], n_own, out=np.zeros(len(rows)), where=n_own > 0)
        means = sums / sizes
        means[rows, own] = np.inf
        inter = means.min(axis=1)
        denom = np.maximum(intra, inter)
        s = np.divide(inter - intra, denom, out=np.zeros(len(rows)), where=denom > 0)
        s[n_own == 0] = 0.0
        scores[a:a + chunk] = s
    return float(scores.mean())


def separability_score(f_flow: np.ndarray, f_fluct: np.ndarray) -> float:
    """Silhouette of the pooled branch features labelled by branch, in [-1, 1]."""
    f_flow, f_fluct = np.atleast_2d(f_flow), np.atleast_2d(f_fluct)
    if f_flow.shape[0] != f_fluct.shape[0]:
        raise ValueError("branch feature sets must have equal row counts")
    if f_flow.shape[0] < 2:
        raise ValueError("separability needs at least two rows per branch")
    pooled = np.concatenate([f_flow, f_fluct], axis=0)
    labels = np.repeat([0, 1], f_flow.shape[0])
    return silhouette(pooled, labels)


# ---------------------------------------------------------------------------
# CSV output


def _time_label(t) -> str:
    return "" if t is None else format_timestamp(t)


def write_saliency_csv(maps: Sequence[SaliencyMap], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("window_time,feature,step_index,value\n")
        for m in maps:
            for r in range(m.values.shape[0]):
                t = _time_label(None if m.times is None else m.times[r])
                for s in range(m.values.shape[1]):
                    fh.write(f"{t},{m.feature},{s},{float(m.values[r, s])!r}\n")


def write_features_csv(features: dict[str, np.ndarray], times: np.ndarray | None,
                       path: str | Path) -> None:
    dims = next(iter(features.values())).shape[1]
    with open(path, "w") as fh:
        fh.write("window_time,branch," + ",".join(f"dim_{k}" for k in range(dims)) + "\n")
        for branch, mat in features.items():
            for r in range(mat.shape[0]):
                t = _time_label(None if times is None else times[r])
                fh.write(f"{t},{branch}," + ",".join(repr(float(v)) for v in mat[r]) + "\n")
