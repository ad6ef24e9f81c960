"""Run configuration: a JSON document validated against dataclass schemas.

Every section is optional; omitted keys take the defaults below and the
fully-defaulted document is echoed into each run report.  Unknown keys are
rejected with their dotted path (``tta.lrr``).
"""

from __future__ import annotations

import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .datagen import GaussianShiftSpec
from .errors import ConfigError
from .meta import MetaConfig
from .tta import TTAConfig

OUTPUT_ENV = "CONJTTA_OUTPUT_DIR"


@dataclass
class DataSection:
    dim: int = 100
    lam: float = 0.7
    k_source: float = 0.0
    k_target: float = 1.0
    d_range: list = field(default_factory=lambda: [0.5, 2.0])
    n_train_per_class: int = 500
    n_val_per_class: int = 300
    n_test_per_class: int = 1000
    val_lams: list = field(default_factory=lambda: [0.6, 0.65])
    train_csv: str | None = None
    test_csv: str | None = None
    val_csvs: list | None = None


@dataclass
class ModelSection:
    architecture: str = "mlp"  # or "linear"
    hidden: list = field(default_factory=lambda: [64, 64])
    path: str | None = None  # load a saved model instead of training


@dataclass
class LossSection:
    kind: str = "cross_entropy"
    params: dict = field(default_factory=dict)


@dataclass
class TrainSection:
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    momentum: float = 0.0


@dataclass
class GridSection:
    lr_grid: list = field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    t_grid: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0])


@dataclass
class MetaSection:
    alpha: float = 0.5
    beta: float = 0.1
    iterations: int = 200
    task_loss: str | None = None  # defaults to the loss kind
    fd_step: float = 1e-3
    batch_size: int = 64
    mask: str = "all"
    grad_clip: float = 1.0
    hidden: list = field(default_factory=lambda: [8, 8])
    n_targets: int = 8


@dataclass
class SliceSection:
    objective: str = "meta"  # "meta" or a TTA method name
    net_path: str | None = None
    base: list | None = None  # defaults to zeros
    dim: int = 0
    range: list = field(default_factory=lambda: [-5.0, 5.0])
    steps: int = 101
    centered: bool = False
    level: float = 0.0


_TTA_DEFAULTS = {f.name: (f.default if f.default is not MISSING else f.default_factory()) for f in fields(TTAConfig)}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    tta: dict = field(default_factory=dict)
    grid: GridSection = field(default_factory=GridSection)
    meta: MetaSection = field(default_factory=MetaSection)
    slice: SliceSection = field(default_factory=SliceSection)

    def tta_config(self) -> TTAConfig:
        return TTAConfig(**{**self.tta, "seed": self.tta.get("seed", self.seed)})

    def meta_config(self) -> MetaConfig:
        m = asdict(self.meta)
        for k in ("hidden", "n_targets"):
            m.pop(k)
        m["task_loss"] = m["task_loss"] or self.loss.kind
        return MetaConfig(**m, seed=self.seed)

    def loss_spec(self):
        from .losses import make_loss

        return make_loss(self.loss.kind, self.loss.params, num_classes=2)

    def shift_spec(self) -> GaussianShiftSpec:
        d = self.data
        return GaussianShiftSpec(dim=d.dim, lam=d.lam, k_source=d.k_source, k_target=d.k_target, d_range=tuple(d.d_range), seed=self.seed)

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV, "runs"))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["tta"] = self.tta_config().to_dict()
        doc["meta"]["task_loss"] = doc["meta"]["task_loss"] or self.loss.kind
        doc["output_dir"] = str(self.resolved_output_dir())
        return doc


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "loss": LossSection,
    "train": TrainSection,
    "grid": GridSection,
    "meta": MetaSection,
    "slice": SliceSection,
}
_TOP = {"seed", "output_dir", "tta", *_SECTIONS}


def _check_type(path: str, value, default) -> None:
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float) and not value.is_integer():
            ok = False
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")


def _build(cls, doc, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}.{key}'")
    kwargs = {}
    for name, value in doc.items():
        f = known[name]
        default = f.default if f.default is not MISSING else f.default_factory()
        _check_type(f"{prefix}.{name}", value, default)
        kwargs[name] = int(value) if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float) else value
    return cls(**kwargs)


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document; raises :class:`ConfigError` naming the bad key."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in _TOP:
            raise ConfigError(f"unknown config key '{key}'")
    kwargs = {}
    if "seed" in doc:
        _check_type("seed", doc["seed"], 0)
        kwargs["seed"] = int(doc["seed"])
    if "output_dir" in doc:
        _check_type("output_dir", doc["output_dir"], "")
        kwargs["output_dir"] = doc["output_dir"]
    for name, cls in _SECTIONS.items():
        if name in doc:
            kwargs[name] = _build(cls, doc[name], name)
    if "tta" in doc:
        tta = doc["tta"]
        if not isinstance(tta, dict):
            raise ConfigError("tta: expected an object")
        for key, value in tta.items():
            if key not in _TTA_DEFAULTS:
                raise ConfigError(f"unknown config key 'tta.{key}'")
            _check_type(f"tta.{key}", value, _TTA_DEFAULTS[key])
        kwargs["tta"] = dict(tta)
    cfg = RunConfig(**kwargs)
    # construct the typed configs once so value errors surface before any work
    cfg.tta_config()
    cfg.meta_config()
    cfg.loss_spec()
    cfg.shift_spec()
    return cfg


def apply_override(doc: dict, assignment: str) -> None:
    """``section.key=value`` with ``value`` parsed as JSON (bare strings allowed)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {path!r}: '{k}' is not a section")
    node[keys[-1]] = value


def load_config(path, overrides=()) -> RunConfig:
    if path is None:
        doc = {}
    else:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for item in overrides:
        apply_override(doc, item)
    return parse_config(doc)
