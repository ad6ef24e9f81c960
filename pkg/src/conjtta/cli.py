"""``conjtta`` command-line entry point.

Every subcommand reads one JSON config (``--config``, optional), applies
``--set section.key=value`` overrides, runs its stage and writes
``report.json`` plus stage CSV/JSON files into the output directory.
stdout carries a short summary whose numbers are all copied into the report.

Exit codes: 0 success, 1 I/O or parse error, 2 configuration error,
3 numerical failure, 4 a ``check`` invariant failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checks import run_checks
from .config import RunConfig, load_config
from .datagen import Dataset, load_csv, make_benchmark, save_csv
from .errors import ConfigError, ContractError, DimensionError, NumericalError, ParseError
from .experiments import MetaStudyConfig, ToyConfig, meta_template_study, reproduce_appendix_a1
from .meta import (
    MetaLossNet,
    centered_objective,
    fit_quadratic,
    fit_scaled_entropy,
    save_slice_csv,
    slice_export,
)
from .models import accuracy, linear_model, load_model, mlp_model, save_model, train_source
from .tta import METHODS, TTAConfig, _extras, adapt_online, grid_search, make_stream, tta_objective

COMMANDS = ("gen-data", "train-source", "adapt", "grid", "meta-train", "slice", "check", "reproduce-a1")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4


class Run:
    """Collects results, the stdout summary and written files for one command."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.results: dict = {}
        self.summary: dict = {}
        self.stages: dict = {}
        self.files: list[str] = []
        self.start = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def say(self, key: str, value) -> None:
        self.summary[key] = value
        print(f"{key}: {value!r}" if isinstance(value, float) else f"{key}: {value}")

    def stage(self, name: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        value = fn(*args, **kwargs)
        self.stages[name] = time.perf_counter() - t0
        return value

    def finish(self, extra_config: dict | None = None) -> Path:
        manifest = []
        for name in sorted(set(self.files)):
            data = (self.out / name).read_bytes()
            manifest.append({"name": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        report = {
            "tool": "conjtta",
            "version": __version__,
            "command": self.command,
            "config": {**self.cfg.to_dict(), **(extra_config or {})},
            "summary": self.summary,
            "results": self.results,
            "files": manifest,
            "wall_clock": {"total_seconds": time.perf_counter() - self.start, "stages": self.stages},
        }
        path = self.out / "report.json"
        with open(path, "w") as fh:
            json.dump(_jsonable(report), fh, indent=2, allow_nan=True)
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ----------------------------------------------------------------------------
# data and models


def _bench(cfg: RunConfig):
    return make_benchmark(cfg.shift_spec())


def _dataset(cfg: RunConfig, role: str) -> Dataset:
    d = cfg.data
    csv_key = {"source_train": "train_csv", "test_stream": "test_csv"}.get(role)
    if csv_key and getattr(d, csv_key):
        ds = load_csv(getattr(d, csv_key), role)
        if ds.inputs.shape[1] != d.dim:
            raise DimensionError(f"data.{csv_key}: {ds.inputs.shape[1]} features but data.dim is {d.dim}")
        return ds
    n = {"source_train": d.n_train_per_class, "source_val": d.n_val_per_class}.get(role, d.n_test_per_class)
    return _bench(cfg).dataset(role, n)


def _val_sets(cfg: RunConfig) -> list[Dataset]:
    d = cfg.data
    if d.val_csvs:
        return [load_csv(p, "val_stream") for p in d.val_csvs]
    bench = _bench(cfg)
    return [bench.dataset("val_stream", d.n_val_per_class, lam=lam, stream=i) for i, lam in enumerate(d.val_lams)]


def _targets(spec, ds: Dataset) -> np.ndarray:
    """Labels in the form ``predict_labels`` emits for ``spec``."""
    return np.asarray(ds.labels) if spec.kind == "exponential" else ds.class_indices()


def _build_model(cfg: RunConfig, spec):
    m = cfg.model
    if m.architecture == "linear":
        return linear_model(cfg.data.dim, spec.width, seed=cfg.seed)
    if m.architecture == "mlp":
        if spec.kind == "exponential":
            raise ConfigError("model.architecture: the exponential loss needs 'linear'")
        return mlp_model(cfg.data.dim, spec.width, hidden=tuple(m.hidden), seed=cfg.seed)
    raise ConfigError(f"model.architecture: unknown value {m.architecture!r}")


def _source_model(run: Run, spec):
    """Load ``model.path`` or train a fresh source model from the config."""
    cfg = run.cfg
    if cfg.model.path:
        model = load_model(cfg.model.path)
        if model.in_dim != cfg.data.dim:
            raise DimensionError(f"model.path: model takes {model.in_dim} features but data.dim is {cfg.data.dim}")
        if model.width != spec.width:
            raise DimensionError(f"model.path: model emits {model.width} outputs, loss.kind needs {spec.width}")
        run.results["source"] = {"loaded_from": cfg.model.path, "checksum": model.checksum()}
        return model
    train = _dataset(cfg, "source_train")
    t = cfg.train
    model = run.stage(
        "train_source", train_source,
        _build_model(cfg, spec), train.inputs, _targets(spec, train), spec,
        lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, seed=cfg.seed, momentum=t.momentum,
    )
    run.results["source"] = {"train_loss": list(model.info.get("train_loss", [])), "checksum": model.checksum()}
    return model


def _stream(cfg: RunConfig, tta: TTAConfig, spec, ds: Dataset):
    return make_stream(ds.inputs, _targets(spec, ds), tta.batch_size)


def _eval_unadapted(cfg: RunConfig, spec, model, ds: Dataset) -> float:
    tta = TTAConfig(**{**cfg.tta_config().to_dict(), "method": "none"})
    return adapt_online(model.copy(), _stream(cfg, tta, spec, ds), spec, tta).mean_online_error


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run: Run) -> int:
    cfg = run.cfg
    sets = {
        "source_train.csv": _dataset(cfg, "source_train"),
        "source_val.csv": _dataset(cfg, "source_val"),
        "test_stream.csv": _dataset(cfg, "test_stream"),
    }
    for i, ds in enumerate(_val_sets(cfg)):
        sets[f"val_stream_{i}.csv"] = ds
    counts = {}
    for name, ds in sets.items():
        save_csv(ds, run.path(name))
        counts[name] = len(ds)
    run.results["datasets"] = counts
    run.results["shift_spec"] = cfg.shift_spec().to_dict()
    for name, n in counts.items():
        run.say(name, n)
    return EXIT_OK


def cmd_train_source(run: Run) -> int:
    cfg = run.cfg
    spec = cfg.loss_spec()
    model = _source_model(run, spec)
    save_model(model, run.path("model.json"))
    val, test = _dataset(cfg, "source_val"), _dataset(cfg, "test_stream")
    src_acc = accuracy(model, spec, val.inputs, _targets(spec, val))
    test_err = run.stage("eval", _eval_unadapted, cfg, spec, model, test)
    run.results.update({"source_accuracy": src_acc, "test_stream_error": test_err})
    run.say("source_accuracy", src_acc)
    run.say("test_stream_error", test_err)
    return EXIT_OK


def cmd_adapt(run: Run) -> int:
    cfg = run.cfg
    spec, tta = cfg.loss_spec(), cfg.tta_config()
    model = _source_model(run, spec)
    test = _dataset(cfg, "test_stream")
    report = run.stage("adapt", adapt_online, model, _stream(cfg, tta, spec, test), spec, tta)
    report.to_json(run.path("online_report.json"))
    report.to_csv(run.path("online_curve.csv"))
    save_model(model, run.path("adapted_model.json"))
    run.results["online_report"] = report.to_dict()
    run.say("method", tta.method)
    run.say("mean_online_error", report.mean_online_error)
    return EXIT_OK


def cmd_grid(run: Run) -> int:
    cfg = run.cfg
    spec, tta = cfg.loss_spec(), cfg.tta_config()
    model = _source_model(run, spec)
    streams = [_stream(cfg, tta, spec, ds) for ds in _val_sets(cfg)]
    res = run.stage("grid", grid_search, model, spec, streams, cfg.grid.lr_grid, cfg.grid.t_grid, tta)
    with open(run.path("grid.csv"), "w") as fh:
        fh.write("lr,temperature,error,diverged\n")
        for row in res.table:
            fh.write(f"{row['lr']!r},{row['temperature']!r},{row['error']!r},{int(row['diverged'])}\n")
    run.results["grid"] = res.to_dict()
    run.say("best_lr", res.best_lr)
    run.say("best_temperature", res.best_temperature)
    run.say("best_error", res.best_error)
    return EXIT_OK


def _meta_study_config(cfg: RunConfig) -> MetaStudyConfig:
    d, m = cfg.data, cfg.meta
    return MetaStudyConfig(
        dim=d.dim,
        source_loss=cfg.loss.kind,
        task_loss=m.task_loss,
        lam=float(d.val_lams[0]) if d.val_lams else d.lam,
        n_targets=m.n_targets,
        n_per_class=d.n_val_per_class,
        hidden=tuple(m.hidden),
        meta=cfg.meta_config(),
        slice_range=tuple(cfg.slice.range),
        slice_steps=cfg.slice.steps,
    )


def cmd_meta_train(run: Run) -> int:
    cfg = run.cfg
    spec = cfg.loss_spec()
    if spec.width != 2:
        raise ConfigError("loss.kind: meta-train needs a two-logit loss")
    model = _source_model(run, spec)
    study_cfg = _meta_study_config(cfg)
    res = run.stage("meta_train", meta_template_study, cfg.seed, study_cfg, model)
    res.net.save(run.path("meta_net.json"))
    with open(run.path("meta_trajectory.csv"), "w") as fh:
        fh.write("iteration,outer_loss\n")
        for i, v in enumerate(res.trajectory):
            fh.write(f"{i},{v!r}\n")
    save_slice_csv(res.curve, run.path("meta_slice.csv"))
    run.results["meta"] = {**res.to_dict(), "trajectory": res.trajectory, "study": study_cfg.to_dict()}
    run.say("held_out_before", res.held_out_before)
    run.say("held_out_after", res.held_out_after)
    run.say("entropy_residual", res.entropy_fit.residual)
    run.say("quadratic_residual", res.quadratic_fit.residual)
    run.say("flag", res.flag or "OK")
    return EXIT_OK


def cmd_slice(run: Run) -> int:
    cfg, s = run.cfg, run.cfg.slice
    if s.objective == "meta":
        if not s.net_path:
            raise ConfigError("slice.net_path is required when slice.objective is 'meta'")
        net = MetaLossNet.load(s.net_path)
        width = net.num_classes
        objective = centered_objective(net, s.level) if s.centered else net
    elif s.objective in METHODS:
        spec, tta = cfg.loss_spec(), cfg.tta_config()
        width = spec.width
        extras = _extras(tta)

        def objective(h):
            return tta_objective(s.objective, spec, h / tta.temperature, extras)
    else:
        raise ConfigError(f"slice.objective: unknown value {s.objective!r}")
    base = np.zeros(width) if s.base is None else np.asarray(s.base, dtype=np.float64)
    if base.size != width:
        raise DimensionError(f"slice.base has {base.size} entries, objective expects {width}")
    curve = slice_export(objective, base, s.dim, tuple(s.range), s.steps)
    save_slice_csv(curve, run.path("slice.csv"))
    ent, quad = fit_scaled_entropy(curve, base, s.dim), fit_quadratic(curve)
    run.results["slice"] = {"entropy_fit": vars(ent), "quadratic_fit": vars(quad), "points": len(curve)}
    run.say("points", len(curve))
    run.say("entropy_residual", ent.residual)
    run.say("quadratic_residual", quad.residual)
    return EXIT_OK


def cmd_check(run: Run) -> int:
    results = run_checks()
    run.results["checks"] = [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]
    run.stages.update({f"check:{r.name}": r.seconds for r in results})
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = sum(not r.passed for r in results)
    run.say("failed", failed)
    return EXIT_OK if failed == 0 else EXIT_CHECK


def cmd_reproduce_a1(run: Run, seeds) -> int:
    toy = ToyConfig(dim=run.cfg.data.dim)
    res = run.stage("reproduce_a1", reproduce_appendix_a1, seeds, toy, run.out)
    run.files.append("appendix_a1_table.csv")
    run.files.extend(f"curve_lam{lam}_{m}.csv" for lam in toy.levels for m in toy.methods)
    table = {f"{lam}/{m}": v for (lam, m), v in res["table"].items()}
    run.results["appendix_a1"] = {"table": table, "per_seed": {f"{lam}/{m}": v for (lam, m), v in res["per_seed"].items()}}
    run.results["toy_config"] = toy.to_dict()
    run.results["seeds"] = list(seeds)
    for key, value in table.items():
        run.say(key, value)
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conjtta", description="Test-time adaptation with conjugate pseudo-labels.")
    parser.add_argument("--version", action="version", version=f"conjtta {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, value parsed as JSON")
        if name == "reproduce-a1":
            p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f"output_dir={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        run = Run(args.command, cfg, cfg.resolved_output_dir())
        if args.command == "reproduce-a1":
            code = cmd_reproduce_a1(run, args.seeds)
        else:
            code = HANDLERS[args.command](run)
        path = run.finish()
        print(f"report: {path}")
        return code
    except (ConfigError, DimensionError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "grid": cmd_grid,
    "meta-train": cmd_meta_train,
    "slice": cmd_slice,
    "check": cmd_check,
}


if __name__ == "__main__":
    sys.exit(main())
