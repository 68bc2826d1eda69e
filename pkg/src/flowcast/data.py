"""Detector series ingestion, fluctuation feature, windowing, splits and scaling."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

STEP_5MIN = 300
SAMPLES_PER_DAY = 24 * 3600 // STEP_5MIN


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class RawSeries:
    timestamps: np.ndarray  # int64 epoch seconds
    flow: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.timestamps.shape != self.flow.shape or self.flow.ndim != 1:
            raise DataError("timestamps and flow must be 1-D and of equal length")

    def __len__(self) -> int:
        return self.flow.size

    @property
    def step(self) -> int:
        if len(self) < 2:
            raise DataError("a single sample has no spacing")
        return int(np.median(np.diff(self.timestamps)))


@dataclass
class SeriesPair:
    """Flow and fluctuation, co-indexed: ``fluct[t] = flow[t] - flow[t-1]``.

    The first raw sample has no predecessor, so it only contributes to
    ``fluct[0]``; ``flow`` and ``timestamps`` start at the second sample.
    """

    timestamps: np.ndarray
    flow: np.ndarray
    fluct: np.ndarray

    @classmethod
    def from_raw(cls, raw: RawSeries) -> "SeriesPair":
        fluct = differencing(raw.flow)
        return cls(raw.timestamps[1:], raw.flow[1:], fluct)

    def __len__(self) -> int:
        return self.flow.size


@dataclass
class NormParams:
    flow_min: float
    flow_max: float
    fluct_min: float
    fluct_max: float

    def apply_flow(self, v):
        return (np.asarray(v) - self.flow_min) / (self.flow_max - self.flow_min)

    def inverse_flow(self, v):
        return np.asarray(v) * (self.flow_max - self.flow_min) + self.flow_min

    def apply_fluct(self, v):
        return (np.asarray(v) - self.fluct_min) / (self.fluct_max - self.fluct_min)

    def inverse_fluct(self, v):
        return np.asarray(v) * (self.fluct_max - self.fluct_min) + self.fluct_min


SPLITS = ("train", "val", "test")


@dataclass
class WindowedDataset:
    """Supervised examples in raw units plus split boundaries and scaling.

    Example ``i`` uses steps ``s_i .. s_i+lag-1`` of both features as input
    and the next ``lead`` flow values as target; ``start_time[i]`` is the
    timestamp of its first input step.
    """

    x: np.ndarray
    dx: np.ndarray
    y: np.ndarray
    start_time: np.ndarray
    lag: int
    lead: int
    step_seconds: int = STEP_5MIN
    n_train: int | None = None
    n_val: int | None = None
    norm: NormParams | None = None
    scaled: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def n_test(self) -> int | None:
        if self.n_train is None:
            return None
        return len(self) - self.n_train - self.n_val

    @property
    def is_split(self) -> bool:
        return self.n_train is not None

    def bounds(self, split: str) -> slice:
        if not self.is_split:
            raise DataError("dataset has not been split")
        a, b = self.n_train, self.n_train + self.n_val
        return {"train": slice(0, a), "val": slice(a, b), "test": slice(b, len(self))}[split]

    def arrays(self, split: str, normalized: bool = True):
        """``(x, dx, y)`` for one split, scaled unless ``normalized=False``."""
        sl = self.bounds(split)
        if normalized:
            if not self.scaled:
                raise DataError("dataset has not been normalized")
            return self.scaled["x"][sl], self.scaled["dx"][sl], self.scaled["y"][sl]
        return self.x[sl], self.dx[sl], self.y[sl]

    def target_times(self, split: str) -> np.ndarray:
        """``n x lead`` timestamps of the predicted steps."""
        sl = self.bounds(split)
        offsets = (self.lag + np.arange(self.lead)) * self.step_seconds
        return self.start_time[sl, None] + offsets[None, :]


# ---------------------------------------------------------------------------
# CSV input


def parse_timestamp(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def read_csv(path: str | Path) -> RawSeries:
    """Read ``timestamp,flow[,occupancy,speed]``; empty flow cells become NaN."""
    ts, flow = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:2] != ["timestamp", "flow"]:
            raise DataError(f"{path}: header must start with 'timestamp,flow', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ts.append(parse_timestamp(row[0]))
                cell = row[1].strip()
                flow.append(float(cell) if cell and cell.lower() not in ("nan", "null") else math.nan)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not ts:
        raise DataError(f"{path}: no data rows")
    return RawSeries(np.array(ts, dtype=np.int64), np.array(flow))


def write_csv(raw: RawSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("timestamp,flow\n")
        for t, v in zip(raw.timestamps, raw.flow):
            fh.write(f"{format_timestamp(t)},{float(v)!r}\n")


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Cleaning and aggregation


def clean(raw: RawSeries, max_fill: int = 3, step: int | None = None) -> list[RawSeries]:
    """Split a raw series into gap-free segments.

    Missing or negative flows are forward-filled when the bad run is at most
    ``max_fill`` samples long and has a valid predecessor; longer runs, and
    holes in the timestamp grid, end the current segment.
    """
    if len(raw) == 0:
        return []
    if np.any(np.diff(raw.timestamps) <= 0):
        raise DataError("timestamps must be strictly increasing")
    step = step or (raw.step if len(raw) > 1 else STEP_5MIN)
    flow = raw.flow.copy()
    bad = ~np.isfinite(flow) | (flow < 0)
    keep = np.ones(len(flow), dtype=bool)
    i = 0
    while i < len(flow):
        if not bad[i]:
            i += 1
            continue
        j = i
        while j < len(flow) and bad[j]:
            j += 1
        if i > 0 and not bad[i - 1] and j - i <= max_fill:
            flow[i:j] = flow[i - 1]
        else:
            keep[i:j] = False
        i = j

    segments, start = [], None
    for k in range(len(flow) + 1):
        contiguous = (k < len(flow) and keep[k] and start is not None
                      and raw.timestamps[k] - raw.timestamps[k - 1] == step and keep[k - 1])
        if contiguous:
            continue
        if start is not None:
            segments.append(RawSeries(raw.timestamps[start:k], flow[start:k]))
            start = None
        if k < len(flow) and keep[k]:
            start = k
    return segments


def aggregate(raw: RawSeries, factor: int = 10, tolerance: int = 1) -> RawSeries:
    """Sum consecutive blocks of ``factor`` samples; a trailing partial block is dropped."""
    if factor < 1:
        raise DataError("aggregation factor must be >= 1")
    if len(raw) > 1:
        d = np.diff(raw.timestamps)
        if np.any(np.abs(d - d[0]) > tolerance):
            raise DataError("non-uniform sample spacing; clean the series first")
    n = len(raw) // factor
    flow = raw.flow[: n * factor].reshape(n, factor).sum(axis=1)
    return RawSeries(raw.timestamps[: n * factor: factor], flow)


def differencing(flow) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.size < 2:
        raise DataError("differencing needs at least two samples")
    return np.diff(flow)


# ---------------------------------------------------------------------------
# Windows, splits, normalization


def make_windows(pair: SeriesPair, lag: int, lead: int,
                 step_seconds: int = STEP_5MIN) -> WindowedDataset:
    if lag < 1 or lead < 1:
        raise DataError("lag and lead must be >= 1")
    n = len(pair)
    if n < lag + lead:
        raise DataError(f"series of {n} aligned samples is shorter than lag+lead={lag + lead}")
    count = n - lag - lead + 1
    x = sliding_window_view(pair.flow, lag)[:count]
    dx = sliding_window_view(pair.fluct, lag)[:count]
    y = sliding_window_view(pair.flow[lag:], lead)[:count]
    return WindowedDataset(x.copy(), dx.copy(), y.copy(), pair.timestamps[:count].copy(),
                           lag, lead, step_seconds)


def concat_windows(parts: list[WindowedDataset]) -> WindowedDataset:
    if not parts:
        raise DataError("no segment is long enough to produce a window")
    first = parts[0]
    return WindowedDataset(
        np.concatenate([p.x for p in parts]), np.concatenate([p.dx for p in parts]),
        np.concatenate([p.y for p in parts]), np.concatenate([p.start_time for p in parts]),
        first.lag, first.lead, first.step_seconds)


def split_chronological(ds: WindowedDataset, train: float = 0.60, val: float = 0.15,
                        test: float = 0.25) -> WindowedDataset:
    """Contiguous train/val/test ranges: floor(train*n), floor(val*n), remainder."""
    fr = (train, val, test)
    if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be non-negative and sum to 1, got {fr}")
    n = len(ds)
    n_train = int(math.floor(train * n + 1e-9))
    n_val = int(math.floor(val * n + 1e-9))
    return replace(ds, n_train=n_train, n_val=n_val, norm=None, scaled={})


def fit_norm(ds: WindowedDataset, split: str = "train") -> NormParams:
    """Min-max ranges from one split (flow from inputs and targets)."""
    x, dx, y = ds.arrays(split, normalized=False)
    if len(y) == 0:
        raise DataError(f"{split} split is empty")
    flow = np.concatenate([x.ravel(), y.ravel()])
    p = NormParams(float(flow.min()), float(flow.max()), float(dx.min()), float(dx.max()))
    if p.flow_max == p.flow_min:
        raise DataError("flow is constant over the training range")
    if p.fluct_max == p.fluct_min:
        raise DataError("fluctuation is constant over the training range")
    return p


def normalize_fit_apply(ds: WindowedDataset, norm: NormParams | None = None) -> WindowedDataset:
    """Scale both features to [0, 1] using training-split ranges.

    Values outside the training range map outside [0, 1]; nothing is clipped.
    A precomputed ``norm`` (e.g. from a manifest) may be supplied instead.
    """
    norm = norm or fit_norm(ds, "train")
    scaled = {"x": norm.apply_flow(ds.x), "dx": norm.apply_fluct(ds.dx),
              "y": norm.apply_flow(ds.y)}
    return replace(ds, norm=norm, scaled=scaled)


def prepare_series(raw: RawSeries, lag: int, lead: int, aggregate_factor: int = 1,
                   max_fill: int = 3, fractions=(0.60, 0.15, 0.25)) -> WindowedDataset:
    """Clean -> (aggregate) -> difference -> window -> split -> normalize."""
    parts = []
    step = None
    for seg in clean(raw, max_fill=max_fill):
        if aggregate_factor > 1:
            seg = aggregate(seg, aggregate_factor)
        if len(seg) < 2:
            continue
        step = seg.step
        pair = SeriesPair.from_raw(seg)
        if len(pair) >= lag + lead:
            parts.append(make_windows(pair, lag, lead, step))
    ds = concat_windows(parts)
    return normalize_fit_apply(split_chronological(ds, *fractions))


# ---------------------------------------------------------------------------
# Synthetic detector data


@dataclass
class SynthParams:
    base_level: float = 165.0
    daily_amp: float = 100.0       # first harmonic (one cycle per day)
    peak_amp: float = 45.0         # second harmonic, splits the day into two peaks
    noise_sd: float = 8.0          # AR(1) innovation scale
    ar_coef: float = 0.6
    events_per_day: float = 1.0
    wave_amp: float = 0.0          # stop-and-go oscillation, fraction of base flow
    wave_period: float = 4.0       # samples
    start: str = "2024-01-01T00:00:00"


def synth_base(n: int, p: SynthParams | None = None) -> np.ndarray:
    """Deterministic double-peak daily profile, ``n`` samples at 5-minute spacing."""
    p = p or SynthParams()
    u = np.arange(n) / SAMPLES_PER_DAY
    return (p.base_level - p.daily_amp * np.cos(2 * np.pi * u)
            - p.peak_amp * np.cos(4 * np.pi * u))


def synth_generate(days: int, seed: int, params: SynthParams | None = None) -> RawSeries:
    """Synthetic 5-minute flow: daily base + AR(1) noise + congestion drops.

    Congestion events cut flow by 30-60 % for 30-90 minutes and recover over a
    30-60 minute linear ramp; they cluster around the two daily peaks.  With
    ``wave_amp > 0`` a short-period stop-and-go oscillation with a random,
    slowly drifting phase rides on top of the flow.
    """
    if days < 1:
        raise DataError("days must be >= 1")
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    n = days * SAMPLES_PER_DAY
    base = synth_base(n, p)

    factor = np.ones(n)
    if p.events_per_day > 0:
        for day in range(days):
            for _ in range(rng.poisson(p.events_per_day)):
                peak = rng.choice([8.25, 15.75]) + rng.normal(0.0, 0.75)
                start = day * SAMPLES_PER_DAY + int(peak * 12)
                drop = rng.uniform(0.3, 0.6)
                hold = int(rng.integers(6, 19))
                ramp = int(rng.integers(6, 13))
                shape = np.concatenate([np.full(hold, drop),
                                        drop * (1.0 - np.arange(1, ramp + 1) / ramp)])
                stop = min(n, start + shape.size)
                if start < n:
                    factor[start:stop] = np.minimum(factor[start:stop],
                                                    1.0 - shape[: stop - start])

    flow = base * factor
    if p.wave_amp > 0:
        phase = np.cumsum(2 * np.pi / p.wave_period + rng.normal(0.0, 0.3, n))
        flow = flow * (1.0 + p.wave_amp * np.sin(phase))

    if p.noise_sd > 0:
        innov = rng.normal(0.0, p.noise_sd, n)
        noise = np.empty(n)
        acc = innov[0] / math.sqrt(1.0 - p.ar_coef ** 2)
        for t in range(n):
            acc = p.ar_coef * acc + innov[t] if t else acc
            noise[t] = acc
        flow = flow + noise

    start = parse_timestamp(p.start)
    ts = start + STEP_5MIN * np.arange(n, dtype=np.int64)
    return RawSeries(ts, np.maximum(flow, 0.0))


# ---------------------------------------------------------------------------
# Manifest and window files


def write_manifest(path: str | Path, entries: dict) -> None:
    with open(path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k} = {_fmt(v)}\n")


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def window_header(lag: int, lead: int) -> list[str]:
    return (["example_index", "start_time", "split"]
            + [f"x_{i}" for i in range(lag)] + [f"dx_{i}" for i in range(lag)]
            + [f"y_{i}" for i in range(lead)])


def write_windows(ds: WindowedDataset, path: str | Path) -> None:
    """Raw-unit windows, one example per row; floats written round-trip exact."""
    split_of = np.empty(len(ds), dtype=object)
    for s in SPLITS:
        split_of[ds.bounds(s)] = s
    with open(path, "w") as fh:
        fh.write(",".join(window_header(ds.lag, ds.lead)) + "\n")
        for i in range(len(ds)):
            vals = ",".join(repr(float(v)) for v in
                            np.concatenate([ds.x[i], ds.dx[i], ds.y[i]]))
            fh.write(f"{i},{format_timestamp(ds.start_time[i])},{split_of[i]},{vals}\n")


def read_windows(path: str | Path, lag: int, lead: int) -> tuple[WindowedDataset, dict]:
    """Inverse of :func:`write_windows`; returns the dataset and per-split counts."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != window_header(lag, lead):
            raise DataError(f"{path}: header does not match lag={lag}, lead={lead}")
        starts, splits, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields")
            starts.append(parse_timestamp(row[1]))
            splits.append(row[2])
            rows.append([float(v) for v in row[3:]])
    vals = np.array(rows, dtype=np.float64).reshape(len(rows), 2 * lag + lead)
    counts = {s: splits.count(s) for s in SPLITS}
    ds = WindowedDataset(vals[:, :lag], vals[:, lag:2 * lag], vals[:, 2 * lag:],
                         np.array(starts, dtype=np.int64), lag, lead)
    return ds, counts
