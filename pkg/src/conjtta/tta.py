"""Online test-time adaptation.

Each incoming batch is used for one optimizer step on the adaptable
parameters, then predicted by the *updated* model.  Objectives operate on
temperature-scaled logits ``h / T`` and are averaged over the batch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tensor, grad
from .errors import ConfigError, ContractError, DivergenceError
from .losses import (
    LossSpec,
    class_logits,
    conjugate_loss_t,
    encode_labels,
    predict_labels,
    pseudolabel_t,
    softmax_entropy,
    supervised_loss_t,
)
from .models import USE_BATCH, USE_RUNNING, Model, forward_t, make_mask, set_running_stats

METHODS = ("conjugate_pl", "entropy", "hard_pl", "soft_pl", "robust_pl", "none")
OPTIMIZERS = ("sgd", "adam")
BN_STATS_MODES = ("replace", "ema", "keep")


@dataclass
class TTAConfig:
    method: str = "conjugate_pl"
    lr: float = 1e-3
    temperature: float = 1.0
    mask: str = "bn_only"
    confidence_threshold: float = 0.9
    q: float = 0.8
    optimizer: str = "sgd"
    seed: int = 0
    batch_size: int = 200
    bn_stats: str = "replace"
    precomputed_labels: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError("confidence_threshold must lie in [0, 1]")
        if not 0.0 < self.q <= 1.0:
            raise ConfigError("q must lie in (0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.bn_stats not in BN_STATS_MODES:
            raise ConfigError(f"unknown bn_stats mode {self.bn_stats!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# objectives


def hard_pseudolabels(spec: LossSpec, h_bar) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class per row and its softmax probability (the confidence)."""
    h_bar = h_bar if isinstance(h_bar, Tensor) else Tensor._const(np.asarray(h_bar, dtype=np.float64))
    probs = class_logits(spec, h_bar.detach()).softmax(axis=-1).data
    return np.argmax(probs, axis=1), probs.max(axis=1)


def tta_objective(method: str, spec: LossSpec, h_bar: Tensor, extras: dict | None = None) -> Tensor:
    """Mean per-sample adaptation objective on temperature-scaled logits.

    ``extras`` may carry ``confidence_threshold`` (hard_pl), ``q``
    (robust_pl) and ``label_logits``: constant logits from which
    pseudo-labels are taken instead of ``h_bar`` itself.
    """
    extras = extras or {}
    if h_bar.ndim != 2 or h_bar.shape[0] == 0:
        raise ContractError("objective needs a non-empty (n, width) batch")
    if h_bar.shape[1] != spec.width:
        raise ConfigError(f"logit width {h_bar.shape[1]} does not match {spec.kind} loss width {spec.width}")
    label_src = extras.get("label_logits")
    label_src = h_bar.detach() if label_src is None else Tensor._const(np.asarray(label_src, dtype=np.float64))

    if method == "none":
        return Tensor._const(np.array(0.0))
    if method == "conjugate_pl":
        if extras.get("label_logits") is not None:
            y = pseudolabel_t(spec, label_src).detach()
            return supervised_loss_t(spec, h_bar, y).mean()
        return conjugate_loss_t(spec, h_bar).mean()
    cl = class_logits(spec, h_bar)
    if method == "entropy":
        return softmax_entropy(cl).mean()
    label_probs = class_logits(spec, label_src).softmax(axis=-1).data
    if method == "soft_pl":
        return -(Tensor._const(label_probs) * cl.log_softmax(axis=-1)).sum(axis=-1).mean()
    top, conf = hard_pseudolabels(spec, label_src)
    if method == "hard_pl":
        keep = conf >= extras.get("confidence_threshold", 0.9)
        if not keep.any():
            return Tensor._const(np.array(0.0))
        if spec.kind == "exponential":
            y = np.where(top == 1, 1.0, -1.0)[:, None]
        else:
            y = encode_labels(spec, top)
        per = supervised_loss_t(spec, h_bar, y)
        return (per * keep.astype(np.float64)).sum() * (1.0 / keep.sum())
    if method == "robust_pl":
        q = float(extras.get("q", 0.8))
        onehot = np.eye(label_probs.shape[1])[top]
        p_top = (cl.softmax(axis=-1) * onehot).sum(axis=-1)
        return ((1.0 - p_top**q) * (1.0 / q)).mean()
    raise ConfigError(f"unknown method {method!r}")


# ----------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, name: str, value: np.ndarray, g: np.ndarray) -> np.ndarray:
        return value - self.lr * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def update(self, name: str, value: np.ndarray, g: np.ndarray) -> np.ndarray:
        b1, b2 = self.betas
        t = self.t.get(name, 0) + 1
        m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
        self.t[name], self.m[name], self.v[name] = t, m, v
        step = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + self.eps)
        return value - self.lr * step


def make_optimizer(config: TTAConfig):
    return Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)


# ----------------------------------------------------------------------------
# steps


def _extras(config: TTAConfig) -> dict:
    return {"confidence_threshold": config.confidence_threshold, "q": config.q}


def objective_and_grads(model: Model, batch, spec: LossSpec, config: TTAConfig, label_logits=None):
    """Objective value and gradients over the masked parameters."""
    names = make_mask(model, config.mask).selected
    leaves = {n: Tensor(model.get(n), requires_grad=True) for n in names}
    stats = USE_BATCH if model.has_bn else USE_RUNNING
    logits, bstats = forward_t(model, batch, stats, leaves)
    extras = _extras(config)
    if label_logits is not None:
        extras["label_logits"] = np.asarray(label_logits) / config.temperature
    obj = tta_objective(config.method, spec, logits / config.temperature, extras)
    grads = dict(zip(names, grad(obj, [leaves[n] for n in names])))
    return obj.item(), grads, bstats


def _step(model: Model, batch, spec, config: TTAConfig, optimizer, index: int = 0, label_logits=None) -> float:
    if config.method == "none":
        return 0.0
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise ContractError("adaptation batches need at least 2 rows")
    value, grads, bstats = objective_and_grads(model, batch, spec, config, label_logits)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite objective at batch {index}")
    updates = {}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name} at batch {index}")
        new = optimizer.update(name, model.get(name), g)
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"non-finite parameter {name} at batch {index}")
        updates[name] = new
    for name, new in updates.items():
        model.set(name, new)
    if bstats and config.bn_stats != "keep":
        set_running_stats(model, bstats, None if config.bn_stats == "replace" else 0.1)
    return value


def tta_step(model: Model, batch, spec: LossSpec, config: TTAConfig, optimizer=None) -> Model:
    """One optimizer step on ``model`` (modified in place and returned)."""
    _step(model, batch, spec, config, optimizer or make_optimizer(config))
    return model


# ----------------------------------------------------------------------------
# online loop


@dataclass
class OnlineReport:
    per_batch: list  # dicts: index, size, loss, error
    mean_online_error: float
    config: dict
    model_checksum: str
    extra: dict = field(default_factory=dict)

    @property
    def mean_online_accuracy(self) -> float:
        return 1.0 - self.mean_online_error

    def recomputed_error(self) -> float:
        n = sum(b["size"] for b in self.per_batch)
        return sum(b["error"] * b["size"] for b in self.per_batch) / n

    def to_dict(self) -> dict:
        return {
            "per_batch": self.per_batch,
            "mean_online_error": self.mean_online_error,
            "config": self.config,
            "model_checksum": self.model_checksum,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "error"])
            for b in self.per_batch:
                w.writerow([b["index"], repr(b["loss"]), repr(b["error"])])


def make_stream(x, labels, batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split ``(x, labels)`` into consecutive batches; a trailing singleton
    batch is merged into its predecessor."""
    x, labels = np.asarray(x), np.asarray(labels)
    cuts = list(range(0, len(x), batch_size))
    if len(cuts) > 1 and len(x) - cuts[-1] < 2:
        cuts.pop()
    bounds = cuts[1:] + [len(x)]
    return [(x[a:b], labels[a:b]) for a, b in zip(cuts, bounds)]


def adapt_online(model: Model, stream, spec: LossSpec, config: TTAConfig) -> OnlineReport:
    """One pass of adapt-then-predict over ``stream`` (pairs of inputs and labels).

    ``model`` is modified in place.  With ``method="none"`` nothing is
    updated and predictions use the stored BN statistics.
    """
    optimizer = make_optimizer(config)
    frozen = model.copy() if config.precomputed_labels else None
    per_batch = []
    for i, (xb, yb) in enumerate(stream):
        xb = np.asarray(xb, dtype=np.float64)
        label_logits = None
        if frozen is not None and config.method != "none":
            label_logits = forward_t(frozen, xb, USE_BATCH if frozen.has_bn else USE_RUNNING)[0].data
        loss = _step(model, xb, spec, config, optimizer, i, label_logits)
        stats = USE_BATCH if (model.has_bn and config.method != "none") else USE_RUNNING
        pred = predict_labels(spec, forward_t(model, xb, stats)[0].data)
        err = float(np.mean(pred != np.asarray(yb)))
        per_batch.append({"index": i, "size": int(len(xb)), "loss": float(loss), "error": err})
    n = sum(b["size"] for b in per_batch)
    mean_err = sum(b["error"] * b["size"] for b in per_batch) / n
    return OnlineReport(per_batch, float(mean_err), config.to_dict(), model.checksum())


# ----------------------------------------------------------------------------
# grid search


@dataclass
class GridResult:
    best_lr: float
    best_temperature: float
    best_error: float
    table: list  # dicts: lr, temperature, error, diverged

    def to_dict(self) -> dict:
        return asdict(self)


def grid_search(model: Model, spec: LossSpec, val_streams, lr_grid, t_grid, config: TTAConfig | None = None) -> GridResult:
    """Evaluate every ``(lr, T)`` on fresh model copies; lowest mean validation
    error wins, ties going to the smaller lr, then the smaller T.

    A diverging cell scores 1.0.
    """
    lr_grid, t_grid = list(lr_grid), list(t_grid)
    if not lr_grid or not t_grid:
        raise ConfigError("grids must be non-empty")
    if not val_streams:
        raise ConfigError("need at least one validation stream")
    base = config or TTAConfig()
    table = []
    for lr in lr_grid:
        for t in t_grid:
            cfg = replace(base, lr=float(lr), temperature=float(t))
            errors, diverged = [], False
            for stream in val_streams:
                try:
                    errors.append(adapt_online(model.copy(), stream, spec, cfg).mean_online_error)
                except DivergenceError:
                    diverged = True
                    break
            err = 1.0 if diverged else float(np.mean(errors))
            table.append({"lr": float(lr), "temperature": float(t), "error": err, "diverged": diverged})
    best = min(table, key=lambda r: (r["error"], r["lr"], r["temperature"]))
    return GridResult(best["lr"], best["temperature"], best["error"], table)
