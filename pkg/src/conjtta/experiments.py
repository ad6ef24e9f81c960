"""Desk-scale experiment protocols shared by the CLI and the acceptance suite.

``reproduce_appendix_a1`` runs the exponential-loss Gaussian toy over three
shift levels; ``meta_template_study`` meta-trains a loss network on a linear
source model and fits entropy / quadratic templates to its slice.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import SHIFT_LEVELS, GaussianShiftSpec, make_benchmark
from .losses import make_loss
from .meta import (
    MetaConfig,
    MetaLossNet,
    TaskLoss,
    centered_objective,
    fit_quadratic,
    fit_scaled_entropy,
    held_out_task_loss,
    meta_train,
    slice_export,
)
from .models import forward, linear_model, mlp_model, train_source
from .tta import TTAConfig, adapt_online, make_stream

# ----------------------------------------------------------------------------
# exponential-loss toy


@dataclass
class ToyConfig:
    dim: int = 100
    n_train_per_class: int = 500
    n_test_per_class: int = 1000
    train_lr: float = 1e-3
    train_epochs: int = 20
    train_batch_size: int = 64
    lr: float = 0.1
    temperature: float = 1.0
    mask: str = "all"
    batch_size: int = 200
    levels: tuple = tuple(SHIFT_LEVELS.values())
    methods: tuple = ("none", "entropy", "hard_pl", "conjugate_pl")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"], d["methods"] = list(self.levels), list(self.methods)
        return d


def toy_source(seed: int, config: ToyConfig):
    """Benchmark and exponential-loss linear source model for one seed."""
    spec = make_loss("exponential", num_classes=2)
    bench = make_benchmark(GaussianShiftSpec(dim=config.dim, seed=seed))
    train = bench.dataset("source_train", config.n_train_per_class)
    model = train_source(
        linear_model(config.dim, 1),
        train.inputs,
        train.labels,
        spec,
        lr=config.train_lr,
        epochs=config.train_epochs,
        batch_size=config.train_batch_size,
        seed=seed,
    )
    return spec, bench, model


def reproduce_appendix_a1(seeds, config: ToyConfig | None = None, out_dir=None) -> dict:
    """Mean online accuracy for every (shift level, method) cell.

    Returns ``{"table": {(lam, method): mean_acc}, "per_seed": ..., "curves": ...}``
    and, when ``out_dir`` is given, writes ``appendix_a1_table.csv`` plus one
    ``curve_lam{lam}_{method}.csv`` per cell (per-step accuracy averaged over seeds).
    """
    config = config or ToyConfig()
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    per_seed: dict = {}
    curves: dict = {}
    for seed in seeds:
        spec, bench, model = toy_source(seed, config)
        for lam in config.levels:
            ds = bench.dataset("test_stream", config.n_test_per_class, lam=lam)
            stream = make_stream(ds.inputs, ds.labels, config.batch_size)
            for method in config.methods:
                tta = TTAConfig(method=method, lr=config.lr, temperature=config.temperature, mask=config.mask, batch_size=config.batch_size, seed=seed)
                report = adapt_online(model.copy(), stream, spec, tta)
                per_seed.setdefault((lam, method), []).append(1.0 - report.mean_online_error)
                curves.setdefault((lam, method), []).append([1.0 - b["error"] for b in report.per_batch])
    table = {k: float(np.mean(v)) for k, v in per_seed.items()}
    mean_curves = {k: np.mean(np.asarray(v), axis=0) for k, v in curves.items()}
    if out_dir is not None:
        write_a1_outputs(Path(out_dir), config, table, mean_curves)
    return {"table": table, "per_seed": per_seed, "curves": mean_curves, "seeds": seeds, "config": config.to_dict()}


def write_a1_outputs(out: Path, config: ToyConfig, table: dict, curves: dict) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "appendix_a1_table.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lam"] + list(config.methods))
        for lam in config.levels:
            w.writerow([repr(lam)] + [repr(table[(lam, m)]) for m in config.methods])
    written.append(path.name)
    for (lam, method), curve in curves.items():
        path = out / f"curve_lam{lam}_{method}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "accuracy"])
            for i, acc in enumerate(curve):
                w.writerow([i, repr(float(acc))])
        written.append(path.name)
    return written


# ----------------------------------------------------------------------------
# meta-loss template study


@dataclass
class MetaStudyConfig:
    dim: int = 100
    source_loss: str = "cross_entropy"
    task_loss: str | None = None  # defaults to the source loss
    lam: float = 0.6
    n_targets: int = 8
    n_per_class: int = 300
    n_train_per_class: int = 500
    train_lr: float = 0.01
    train_epochs: int = 20
    hidden: tuple = (8, 8)
    architecture: str = "linear"
    model_hidden: tuple = (64, 64)
    meta: MetaConfig = field(default_factory=MetaConfig)
    slice_range: tuple = (-3.0, 3.0)
    slice_steps: int = 61

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"], d["slice_range"] = list(self.hidden), list(self.slice_range)
        d["model_hidden"] = list(self.model_hidden)
        return d


@dataclass
class MetaStudyResult:
    seed: int
    held_out_before: float
    held_out_after: float
    curve: np.ndarray
    entropy_fit: object
    quadratic_fit: object
    centered: bool
    trajectory: list
    flag: str
    net: MetaLossNet = field(repr=False, default=None)

    @property
    def relative_reduction(self) -> float:
        # the expanded squared loss can be negative, hence the absolute value
        return (self.held_out_before - self.held_out_after) / abs(self.held_out_before)

    @property
    def entropy_wins(self) -> bool:
        return self.entropy_fit.residual < self.quadratic_fit.residual

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "held_out_before": self.held_out_before,
            "held_out_after": self.held_out_after,
            "relative_reduction": self.relative_reduction,
            "entropy_fit": asdict(self.entropy_fit),
            "quadratic_fit": asdict(self.quadratic_fit),
            "centered_slice": self.centered,
            "flag": self.flag,
        }


def meta_template_study(seed: int, config: MetaStudyConfig | None = None, model=None) -> MetaStudyResult:
    """Meta-train on one seed and fit both templates to the learnt slice.

    Validation streams come from ``n_targets`` independent target draws at
    shift ``lam`` so the learnt loss cannot specialise to a single shift
    direction; the held-out stream uses a further, unseen draw.  For a
    shift-invariant task loss the slice is taken on the centered view of
    the net (see :func:`centered_objective`).  A pre-trained ``model``
    replaces the source training step.
    """
    config = config or MetaStudyConfig()
    task_name = config.task_loss or config.source_loss
    spec = make_loss(config.source_loss, num_classes=2)
    bench = make_benchmark(GaussianShiftSpec(dim=config.dim, seed=seed))
    if model is None:
        train = bench.dataset("source_train", config.n_train_per_class)
        if config.architecture == "mlp":
            init = mlp_model(config.dim, 2, hidden=tuple(config.model_hidden), seed=seed)
        else:
            init = linear_model(config.dim, 2)
        model = train_source(
            init, train.inputs, train.class_indices(), spec,
            lr=config.train_lr, epochs=config.train_epochs, batch_size=64, seed=seed,
        )
    streams = []
    for j in range(config.n_targets):
        ds = bench.redraw_target(j).dataset("val_stream", config.n_per_class, lam=config.lam, stream=j)
        streams.append((ds.inputs, ds.class_indices()))
    held = bench.redraw_target(1000).dataset("test_stream", config.n_per_class, lam=config.lam, stream=1000)
    meta_cfg = MetaConfig(**{**asdict(config.meta), "task_loss": task_name, "seed": seed})
    net = MetaLossNet(2, hidden=config.hidden, seed=seed)
    before = held_out_task_loss(net, model, held.inputs, held.class_indices(), meta_cfg)
    result = meta_train(net, model, streams, meta_cfg)
    after = held_out_task_loss(result.net, model, held.inputs, held.class_indices(), meta_cfg)

    base = np.zeros(2)
    centered = TaskLoss(task_name, 2).shift_invariant
    if centered:
        level = float(forward(model, held.inputs).mean())
        curve = slice_export(centered_objective(result.net, level), base, 0, config.slice_range, config.slice_steps)
    else:
        curve = slice_export(result.net, base, 0, config.slice_range, config.slice_steps)
    return MetaStudyResult(
        seed, before, after, curve,
        fit_scaled_entropy(curve, base, 0), fit_quadratic(curve),
        centered, result.trajectory, result.flag, result.net,
    )


def task_invariance_study(seeds, config: MetaStudyConfig | None = None, tasks=("cross_entropy", "squared_prob")) -> dict:
    """Pearson correlation between seed-mean slices learnt under two task losses.

    Both runs share the source model (``config.source_loss``); each slice is
    standardised before averaging so the comparison concerns shape only.
    """
    config = config or MetaStudyConfig()
    seeds = list(seeds)
    means = []
    per_seed = {}
    for task in tasks:
        cfg = MetaStudyConfig(**{**config.__dict__, "task_loss": task})
        curves = []
        for seed in seeds:
            res = meta_template_study(seed, cfg)
            curves.append(_standardise(res.curve[:, 1]))
            per_seed.setdefault(task, []).append(res)
        means.append(np.mean(curves, axis=0))
    r = float(np.corrcoef(means[0], means[1])[0, 1])
    return {"pearson_r": r, "tasks": list(tasks), "seeds": seeds, "mean_curves": means, "per_seed": per_seed}


def _standardise(v: np.ndarray) -> np.ndarray:
    sd = float(np.std(v))
    return (v - np.mean(v)) / sd if sd > 0 else v - np.mean(v)
