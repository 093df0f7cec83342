"""Command-line entry point: ``densreg toy | train | eval | compare``.

Settings come from three layers, later ones winning: built-in defaults for
the command, then ``--config FILE`` (JSON), then each ``--set key=value`` in
the order given. Keys are dotted paths into the config, e.g.
``--set train.stage1_epochs=50`` or ``--set seeds=[0,1,2]``; values are
parsed as JSON and fall back to plain strings.

Every file written embeds the resolved config and the package version, and
nothing time-dependent, so equal configs and seeds give identical bytes. The
one exception is the latency column of the ``compare`` summary.
"""

from __future__ import annotations

import argparse
import copy
import json
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import ShiftSplit, TabularDataset, generate_cubic_toy, load_csv, make_shift_split
from .errors import ConfigError, DensRegError
from .metrics import ForecastSet, MetricsReport, evaluate, write_summary
from .training import (
    DensityRegressor,
    EnsembleModel,
    TrainConfig,
    count_parameters,
    load_checkpoint,
    run_pipeline,
    save_checkpoint,
    time_inference,
    train_ensemble,
    train_gaussian,
    worker_count,
)

METHODS = ("density-regression", "deterministic", "ensemble")
PLOT_GRID = (-7.0, 7.0, 701)

BASE_CONFIG = {
    "method": "density-regression",
    "methods": list(METHODS),
    "dataset": {"kind": "toy", "n_train": 1000, "n_test": 500, "noise_std": 3.0},
    "train": {},
    "ensemble_size": 5,
    "seeds": [0],
    "outdir": "runs",
    "workers": 1,
    "latency_batch": 256,
    "latency_repeats": 30,
}

# The toy's features lie on a curve, where the L1 kernel density tracks
# distance far better than a flow; the narrower bandwidth sharpens the decay.
TOY_TRAIN = {"density": "kde", "kde_bandwidth_scale": 0.5}


def default_config(command: str) -> dict:
    cfg = copy.deepcopy(BASE_CONFIG)
    if command == "toy":
        cfg["train"] = dict(TOY_TRAIN)
    return cfg


# -- config resolution ---------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed key {key!r}")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key!r}: {part!r} is not a section")
    node[parts[-1]] = _parse_value(raw)


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(command: str, config_path=None, overrides=()) -> dict:
    cfg = default_config(command)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"no such config file: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, loaded)
    for assignment in overrides:
        apply_override(cfg, assignment)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    unknown = set(cfg) - set(BASE_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for m in [cfg["method"], *cfg["methods"]]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if not isinstance(cfg["ensemble_size"], int) or cfg["ensemble_size"] < 1:
        raise ConfigError("ensemble_size must be a positive integer")
    if cfg["dataset"].get("kind") not in ("toy", "csv"):
        raise ConfigError("dataset.kind must be 'toy' or 'csv'")
    train_config(cfg, 0)


def train_config(cfg: dict, seed: int) -> TrainConfig:
    if not isinstance(cfg["train"], dict):
        raise ConfigError("train must be an object")
    try:
        return TrainConfig.from_dict({**cfg["train"], "seed": seed})
    except TypeError as exc:
        raise ConfigError(f"bad training settings: {exc}") from None


def provenance(cfg: dict, method: str, seed: int) -> dict:
    return {"config": cfg, "method": method, "seed": seed, "version": __version__}


# -- datasets and models -------------------------------------------------------


def build_split(dataset: dict, seed: int) -> ShiftSplit:
    ds = dict(dataset)
    kind = ds.pop("kind")
    if kind == "toy":
        return generate_cubic_toy(
            n_train=int(ds.get("n_train", 1000)),
            n_test=int(ds.get("n_test", 500)),
            seed=seed,
            noise_std=float(ds.get("noise_std", 3.0)),
        )
    for key in ("source_a", "source_b", "target"):
        if key not in ds:
            raise ConfigError(f"csv dataset needs dataset.{key}")
    a = load_csv(ds["source_a"], ds["target"], ds.get("delimiter"))
    b = load_csv(ds["source_b"], ds["target"], ds.get("delimiter"))
    return make_shift_split(a, b, float(ds.get("iid_fraction", 0.8)), seed)


def fit_method(method: str, train: TabularDataset, cfg: dict, seed: int):
    tc = train_config(cfg, seed)
    if method == "density-regression":
        return run_pipeline(train, tc)
    if method == "deterministic":
        return train_gaussian(train, tc)
    if method == "ensemble":
        return train_ensemble(train, tc, M=cfg["ensemble_size"])
    raise ConfigError(f"unknown method {method!r}")


def evaluate_model(model, ds: TabularDataset, split: str) -> MetricsReport:
    return evaluate(ForecastSet(model.predict(ds.X), ds.y), split)


def run_dir(cfg: dict, method: str, seed: int) -> Path:
    d = Path(cfg["outdir"]) / method / str(seed)
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_metrics(model, split: ShiftSplit, out: Path, prov: dict) -> dict[str, MetricsReport]:
    reports = {
        "iid": evaluate_model(model, split.iid_test, "iid"),
        "ood": evaluate_model(model, split.ood_test, "ood"),
    }
    for name, rep in reports.items():
        rep.write(out / f"metrics_{name}.json", prov)
    return reports


def _header(prov: dict) -> str:
    return "# " + json.dumps(prov, sort_keys=True) + "\n"


def write_rows(path: Path, header: str, columns, rows) -> None:
    lines = [header, ",".join(columns) + "\n"]
    lines += [",".join(repr(float(v)) for v in row) + "\n" for row in rows]
    path.write_text("".join(lines))


def write_plotdata(model, split: ShiftSplit, out: Path, prov: dict) -> Path:
    """Band file: x, mean, mean - 3 std, mean + 3 std on a grid over [-7, 7]."""
    x = np.linspace(*PLOT_GRID)
    pred = model.predict(x.reshape(-1, 1))
    band = np.column_stack([x, pred.mean, pred.mean - 3 * pred.std, pred.mean + 3 * pred.std])
    path = out / "plotdata_band.csv"
    write_rows(path, _header(prov), ("x", "mean", "lower", "upper"), band)
    write_rows(out / "plotdata_train.csv", _header(prov), ("x", "y"), np.column_stack([split.train.X[:, 0], split.train.y]))
    return path


# -- commands ------------------------------------------------------------------


def cmd_toy(cfg: dict) -> list[Path]:
    """Full pipeline on the cubic toy for every seed; checkpoint, metrics and plot data."""
    cfg = _merge(cfg, {"dataset": {"kind": "toy"}})
    written = []
    for seed in cfg["seeds"]:
        split = build_split(cfg["dataset"], seed)
        model = fit_method(cfg["method"], split.train, cfg, seed)
        out = run_dir(cfg, cfg["method"], seed)
        prov = provenance(cfg, cfg["method"], seed)
        save_checkpoint(model, out / "checkpoint.json", prov)
        write_metrics(model, split, out, prov)
        written.append(write_plotdata(model, split, out, prov))
    return written


def cmd_train(cfg: dict) -> list[Path]:
    written = []
    for seed in cfg["seeds"]:
        split = build_split(cfg["dataset"], seed)
        model = fit_method(cfg["method"], split.train, cfg, seed)
        path = run_dir(cfg, cfg["method"], seed) / "checkpoint.json"
        save_checkpoint(model, path, provenance(cfg, cfg["method"], seed))
        written.append(path)
    return written


def cmd_eval(checkpoint, data=None, target=None, split_name="iid", outdir=None) -> list[Path]:
    """Score a checkpoint on its own experiment splits, or on one explicit file.

    Without ``data`` the IID and OOD splits are rebuilt from the config and
    seed stored in the checkpoint. Reports are only written after every
    requested split has been loaded and scored.
    """
    checkpoint = Path(checkpoint)
    model = load_checkpoint(checkpoint)
    state = json.loads(checkpoint.read_text())
    prov = state.get("provenance")
    out = Path(outdir) if outdir is not None else checkpoint.parent
    if data is not None:
        if target is None:
            raise ConfigError("--target is required with --data")
        splits = {split_name: load_csv(data, target)}
        prov = {**(prov or {}), "eval_data": str(data)}
    else:
        if prov is None:
            raise ConfigError(f"{checkpoint} carries no experiment config; pass --data and --target")
        split = build_split(prov["config"]["dataset"], prov["seed"])
        splits = {"iid": split.iid_test, "ood": split.ood_test}
    reports = {name: evaluate_model(model, ds, name) for name, ds in splits.items()}
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rep in reports.items():
        path = out / f"metrics_{name}.json"
        rep.write(path, prov)
        written.append(path)
    return written


def _replicate(job):
    cfg, method, seed = job
    split = build_split(cfg["dataset"], seed)
    model = fit_method(method, split.train, cfg, seed)
    out = run_dir(cfg, method, seed)
    prov = provenance(cfg, method, seed)
    save_checkpoint(model, out / "checkpoint.json", prov)
    reports = write_metrics(model, split, out, prov)
    return method, seed, {k: r.to_dict() for k, r in reports.items()}, count_parameters(model)


METRIC_KEYS = ("nll", "rmse", "cal", "sharp")


def mean_std(values) -> str:
    values = [float(v) for v in values]
    sd = statistics.pstdev(values) if len(values) > 1 else 0.0
    return f"{statistics.fmean(values):.4f} ± {sd:.4f}"


def cmd_compare(cfg: dict) -> Path:
    """Methods x seeds; per-replicate outputs plus one mean ± std row per method.

    Replicates may run in worker processes. Latency is timed afterwards in
    this process, one method at a time, on the same IID batch.
    """
    jobs = [(cfg, m, s) for m in cfg["methods"] for s in cfg["seeds"]]
    n = worker_count(cfg["workers"])
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_replicate, jobs))
    else:
        results = [_replicate(j) for j in jobs]

    out = Path(cfg["outdir"])
    run_rows = []
    for method, seed, reports, params in results:
        for name, rep in reports.items():
            run_rows.append({"method": method, "seed": seed, "split": name, **{k: rep[k] for k in METRIC_KEYS}, "params": params})
    write_summary(run_rows, out / "runs.csv", extra_columns=("params",))

    first = cfg["seeds"][0]
    batch = build_split(cfg["dataset"], first).iid_test.X
    reps = int(np.ceil(cfg["latency_batch"] / batch.shape[0]))
    batch = np.tile(batch, (reps, 1))[: cfg["latency_batch"]]
    columns = ["method", "n_seeds"] + [f"{k}_{s}" for s in ("iid", "ood") for k in METRIC_KEYS] + ["params", "latency_ms"]
    lines = [_header(provenance(cfg, "compare", first)), ",".join(columns) + "\n"]
    for method in cfg["methods"]:
        mine = [r for r in results if r[0] == method]
        row = [method, str(len(mine))]
        for s in ("iid", "ood"):
            row += [mean_std([r[2][s][k] for r in mine]) for k in METRIC_KEYS]
        model = load_checkpoint(out / method / str(first) / "checkpoint.json")
        latency = time_inference(model, batch, repeats=cfg["latency_repeats"])
        row += [str(mine[0][3]), f"{latency * 1e3:.4f}"]
        lines.append(",".join(row) + "\n")
    path = out / "summary.csv"
    path.write_text("".join(lines))
    return path


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"densreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one setting (repeatable)")
        p.add_argument("--outdir", help="shorthand for --set outdir=DIR")
        return p

    with_config(sub.add_parser("toy", help="cubic toy experiment with plot data"))
    with_config(sub.add_parser("train", help="train one method per seed and save checkpoints"))
    with_config(sub.add_parser("compare", help="methods x seeds with a mean ± std summary"))
    ev = sub.add_parser("eval", help="write metrics reports for a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--data", help="delimited file to score instead of the stored splits")
    ev.add_argument("--target", help="target column of --data")
    ev.add_argument("--split-name", default="iid", choices=("iid", "ood"))
    ev.add_argument("--outdir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            paths = cmd_eval(args.checkpoint, args.data, args.target, args.split_name, args.outdir)
        else:
            overrides = list(args.overrides) + ([f"outdir={json.dumps(args.outdir)}"] if args.outdir else [])
            cfg = resolve_config(args.command, args.config, overrides)
            result = {"toy": cmd_toy, "train": cmd_train, "compare": cmd_compare}[args.command](cfg)
            paths = result if isinstance(result, list) else [result]
    except DensRegError as exc:
        print(f"densreg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"densreg: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
