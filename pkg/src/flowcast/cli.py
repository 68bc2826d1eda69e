"""Command-line entry point: ``flowcast <command> [--key value ...]``.

Every setting is a flat key; defaults can be overridden by a ``key = value``
config file (``--config``) and then by command-line flags.  Each command
writes the effective configuration, derived seeds and input hashes to
``config.txt`` in its output directory.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data, evaluation, interpret, training
from .models import ModelConfig, ModelVariant, build, load_model, save_model

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_INPUT, EXIT_TRAINING, EXIT_MODEL = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category, self.code = category, code


def config_error(msg: str) -> CliError:
    return CliError("config", msg, EXIT_CONFIG)


def input_error(msg: str) -> CliError:
    return CliError("input", msg, EXIT_INPUT)


_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "seed"]
_SYNTH_KEYS = [f.name for f in fields(data.SynthParams) if f.name != "start"]

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "variant": "LSTM",
    # paths
    "input": "", "data": "", "model": "", "out": "",
    # synthetic data
    "days": 60, "synth_start": data.SynthParams.start,
    **{f"synth_{k}": getattr(data.SynthParams, k) for k in _SYNTH_KEYS},
    # dataset preparation
    "aggregate_factor": 1, "max_fill": 3,
    "train_fraction": 0.60, "val_fraction": 0.15, "test_fraction": 0.25,
    # model
    **{k: getattr(ModelConfig, k) for k in _MODEL_KEYS},
    # training
    "epochs": 300, "batch_size": 15, "learning_rate": 0.1, "rho": 0.95,
    "epsilon": 1e-7, "shuffle_train": True,
    # grid search
    "grid_learning_rates": "0.01,0.1,1.0", "grid_batch_sizes": "15,20,32", "workers": 1,
    # evaluation and inspection
    "congestion_method": "percentile", "congestion_percentile": 85.0,
    "saliency_day": 0, "saliency_horizons": "", "saliency_per_horizon": True,
    "features_max_windows": 0,
}

COMMANDS = ("synth", "prepare", "train", "grid", "eval", "saliency", "features")


def _parse_value(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise config_error(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def read_config_file(path: str | Path) -> dict[str, object]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise input_error(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise config_error(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise config_error(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat 'key = value' config file")
        for key in DEFAULTS:
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    return parser


def resolve_config(args: argparse.Namespace) -> dict[str, object]:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key)
        if value is not None:
            cfg[key] = _parse_value(key, value)
    return cfg


def derived_seeds(seed: int) -> dict[str, int]:
    """Independent per-component seeds expanded from the run seed."""
    names = ("synth", "init", "shuffle")
    states = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(s.generate_state(1)[0]) for n, s in zip(names, states)}


def write_provenance(out_dir: Path, cfg: dict, inputs: dict[str, Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.txt", "w") as fh:
        for key, value in cfg.items():
            fh.write(f"{key} = {value}\n")
        for name, seed in derived_seeds(int(cfg["seed"])).items():
            fh.write(f"derived_seed_{name} = {seed}\n")
        for name, path in inputs.items():
            fh.write(f"input_sha256_{name} = {data.file_sha256(path)}\n")


def _path(cfg: dict, key: str, must_exist: bool = True) -> Path:
    if not cfg[key]:
        raise config_error(f"--{key} is required")
    path = Path(str(cfg[key]))
    if must_exist and not path.exists():
        raise input_error(f"{key} path {path} does not exist")
    return path


def _floats(text: str, key: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise config_error(f"{key}: expected comma-separated numbers") from None


def model_config(cfg: dict, seed: int | None = None) -> ModelConfig:
    try:
        return ModelConfig(**{k: cfg[k] for k in _MODEL_KEYS},
                           seed=derived_seeds(int(cfg["seed"]))["init"] if seed is None else seed)
    except ValueError as exc:
        raise config_error(str(exc)) from None


def train_config(cfg: dict) -> training.TrainConfig:
    try:
        return training.TrainConfig(
            epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
            learning_rate=float(cfg["learning_rate"]), rho=float(cfg["rho"]),
            epsilon=float(cfg["epsilon"]), seed=derived_seeds(int(cfg["seed"]))["shuffle"],
            shuffle_train=bool(cfg["shuffle_train"]))
    except ValueError as exc:
        raise config_error(str(exc)) from None


def variant_of(cfg: dict) -> ModelVariant:
    try:
        return ModelVariant(str(cfg["variant"]).upper())
    except ValueError:
        names = ", ".join(v.value for v in ModelVariant)
        raise config_error(f"unknown variant {cfg['variant']!r}; choose from {names}") from None


# ---------------------------------------------------------------------------
# Dataset directory


def load_dataset(data_dir: Path) -> data.WindowedDataset:
    manifest_path, windows_path = data_dir / "manifest.txt", data_dir / "windows.csv"
    for p in (manifest_path, windows_path):
        if not p.exists():
            raise input_error(f"{p} not found; run 'flowcast prepare' first")
    man = data.read_manifest(manifest_path)
    try:
        lag, lead = int(man["lag"]), int(man["lead"])
        norm = data.NormParams(float(man["flow_min"]), float(man["flow_max"]),
                               float(man["fluct_min"]), float(man["fluct_max"]))
        step = int(man["step_seconds"])
    except (KeyError, ValueError) as exc:
        raise input_error(f"{manifest_path}: malformed manifest ({exc})") from None
    ds, counts = data.read_windows(windows_path, lag, lead)
    ds.step_seconds = step
    ds.n_train, ds.n_val = counts["train"], counts["val"]
    return data.normalize_fit_apply(ds, norm)


def cmd_synth(cfg: dict) -> Path:
    out = _path(cfg, "out", must_exist=False)
    params = data.SynthParams(start=str(cfg["synth_start"]),
                              **{k: float(cfg[f"synth_{k}"]) for k in _SYNTH_KEYS})
    raw = data.synth_generate(int(cfg["days"]), derived_seeds(int(cfg["seed"]))["synth"], params)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_csv(raw, out)
    write_provenance(out.parent, cfg, {})
    return out


def cmd_prepare(cfg: dict) -> Path:
    src, out = _path(cfg, "input"), _path(cfg, "out", must_exist=False)
    fractions = (float(cfg["train_fraction"]), float(cfg["val_fraction"]),
                 float(cfg["test_fraction"]))
    raw = data.read_csv(src)
    ds = data.prepare_series(raw, int(cfg["lag"]), int(cfg["lead"]),
                             aggregate_factor=int(cfg["aggregate_factor"]),
                             max_fill=int(cfg["max_fill"]), fractions=fractions)
    out.mkdir(parents=True, exist_ok=True)
    data.write_windows(ds, out / "windows.csv")
    n = ds.norm
    data.write_manifest(out / "manifest.txt", {
        "lag": ds.lag, "lead": ds.lead, "step_seconds": ds.step_seconds,
        "train_fraction": fractions[0], "val_fraction": fractions[1],
        "test_fraction": fractions[2], "aggregate_factor": int(cfg["aggregate_factor"]),
        "max_fill": int(cfg["max_fill"]), "normalization": "minmax_train",
        "flow_min": n.flow_min, "flow_max": n.flow_max,
        "fluct_min": n.fluct_min, "fluct_max": n.fluct_max,
        "examples": len(ds), "train": ds.n_train, "val": ds.n_val, "test": ds.n_test,
        "source_sha256": data.file_sha256(src), "seed": int(cfg["seed"]),
    })
    write_provenance(out, cfg, {"input": src})
    return out


def cmd_train(cfg: dict) -> Path:
    data_dir, out = _path(cfg, "data"), _path(cfg, "out", must_exist=False)
    ds = load_dataset(data_dir)
    _check_window_shape(cfg, ds)
    out.mkdir(parents=True, exist_ok=True)
    model = build(variant_of(cfg), model_config(cfg))
    training.train(model, ds, train_config(cfg), log_path=out / "history.csv")
    save_model(model, out / "model.bin")
    write_provenance(out, cfg, {"windows": data_dir / "windows.csv"})
    return out


def cmd_grid(cfg: dict) -> Path:
    data_dir, out = _path(cfg, "data"), _path(cfg, "out", must_exist=False)
    ds = load_dataset(data_dir)
    _check_window_shape(cfg, ds)
    lrs = _floats(cfg["grid_learning_rates"], "grid_learning_rates")
    batches = [int(b) for b in _floats(cfg["grid_batch_sizes"], "grid_batch_sizes")]
    if not lrs or not batches:
        raise config_error("grid needs at least one learning rate and one batch size")
    result = training.grid_search(variant_of(cfg), ds, model_config(cfg), train_config(cfg),
                                  lrs, batches, workers=int(cfg["workers"]))
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "grid.csv")
    with open(out / "best.txt", "w") as fh:
        b = result.best
        fh.write(f"batch_size = {b.batch_size}\nlearning_rate = {b.learning_rate!r}\n"
                 f"min_val_loss = {b.min_val_loss!r}\nbest_epoch = {b.best_epoch}\n")
    write_provenance(out, cfg, {"windows": data_dir / "windows.csv"})
    return out


def _load_model(cfg: dict):
    path = _path(cfg, "model")
    try:
        return load_model(path), path
    except (ValueError, OSError) as exc:
        raise CliError("model", f"cannot load {path}: {exc}", EXIT_MODEL) from None


def _check_window_shape(cfg_or_model, ds: data.WindowedDataset) -> None:
    lag, lead = ((cfg_or_model.cfg.lag, cfg_or_model.cfg.lead) if hasattr(cfg_or_model, "cfg")
                 else (int(cfg_or_model["lag"]), int(cfg_or_model["lead"])))
    if (lag, lead) != (ds.lag, ds.lead):
        raise config_error(f"lag/lead {lag}/{lead} do not match the dataset's {ds.lag}/{ds.lead}")


def cmd_eval(cfg: dict) -> Path:
    model, model_path = _load_model(cfg)
    data_dir, out = _path(cfg, "data"), _path(cfg, "out", must_exist=False)
    ds = load_dataset(data_dir)
    _check_window_shape(model, ds)
    report = evaluation.evaluate(model, ds, "test", str(cfg["congestion_method"]),
                                 float(cfg["congestion_percentile"]))
    report.write(out)
    val = training.evaluate_loss(model, *_split_inputs(model, ds, "val"))
    with open(out / "report.txt", "a") as fh:
        fh.write(f"val_normalized_mse = {val!r}\n")
    write_provenance(out, cfg, {"model": model_path, "windows": data_dir / "windows.csv"})
    return out


def _split_inputs(model, ds, split):
    x, dx, y = ds.arrays(split)
    return x, (dx if model.variant.merged else None), y


def cmd_saliency(cfg: dict) -> Path:
    model, model_path = _load_model(cfg)
    data_dir, out = _path(cfg, "data"), _path(cfg, "out", must_exist=False)
    ds = load_dataset(data_dir)
    _check_window_shape(model, ds)
    x, dx, _ = _split_inputs(model, ds, "test")
    times = ds.start_time[ds.bounds("test")]
    per_day = 86400 // ds.step_seconds
    day = int(cfg["saliency_day"])
    sel = slice(day * per_day, (day + 1) * per_day)
    if day < 0 or sel.start >= len(times):
        raise config_error(f"saliency_day {day} is outside the test split")
    horizons = [int(h) for h in _floats(cfg["saliency_horizons"], "saliency_horizons")] or None
    maps = interpret.input_saliency(model, x[sel], None if dx is None else dx[sel], horizons,
                                    bool(cfg["saliency_per_horizon"]), times[sel])
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list] = {}
    for m in maps:
        groups.setdefault(m.horizons, []).append(m)
    for hs, group in groups.items():
        interpret.write_saliency_csv(group, out / f"saliency_h{'-'.join(map(str, hs))}.csv")
    write_provenance(out, cfg, {"model": model_path, "windows": data_dir / "windows.csv"})
    return out


def cmd_features(cfg: dict) -> Path:
    model, model_path = _load_model(cfg)
    data_dir, out = _path(cfg, "data"), _path(cfg, "out", must_exist=False)
    ds = load_dataset(data_dir)
    _check_window_shape(model, ds)
    if not model.variant.merged:
        raise config_error(f"{model.variant.value} has no branch features; use a merged variant")
    x, dx, _ = ds.arrays("test")
    times = ds.start_time[ds.bounds("test")]
    limit = int(cfg["features_max_windows"])
    if limit > 0 and len(times) > limit:
        keep = np.linspace(0, len(times) - 1, limit).round().astype(int)
        x, dx, times = x[keep], dx[keep], times[keep]
    feats = interpret.extract_features(model, x, dx)
    score = interpret.separability_score(feats["flow"], feats["fluct"])
    out.mkdir(parents=True, exist_ok=True)
    interpret.write_features_csv(feats, times, out / "features.csv")
    with open(out / "separability.txt", "w") as fh:
        fh.write(f"windows = {len(times)}\nsilhouette = {score!r}\n")
    write_provenance(out, cfg, {"model": model_path, "windows": data_dir / "windows.csv"})
    return out


HANDLERS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "grid": cmd_grid,
            "eval": cmd_eval, "saliency": cmd_saliency, "features": cmd_features}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = HANDLERS[args.command](cfg)
    except CliError as exc:
        print(f"flowcast {args.command}: error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    except data.DataError as exc:
        print(f"flowcast {args.command}: error[input]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except training.TrainingError as exc:
        print(f"flowcast {args.command}: error[training]: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (interpret.UntrainedModelError, evaluation.MetricError) as exc:
        print(f"flowcast {args.command}: error[model]: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"flowcast {args.command}: error[io]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"flowcast {args.command}: wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
