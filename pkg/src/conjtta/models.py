"""Source classifiers: affine / batch-norm / ReLU stacks, training, persistence."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, grad
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, ParseError
from .losses import LossSpec, encode_labels, supervised_loss_t

FORMAT_VERSION = 1
USE_BATCH = "use_batch"
USE_RUNNING = "use_running"


@dataclass
class Affine:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def of_width(cls, width: int) -> "BatchNorm":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width))

    @property
    def in_dim(self) -> int:
        return self.gamma.shape[0]

    out_dim = in_dim


@dataclass
class ReLU:
    pass


_PARAM_NAMES = {Affine: ("weight", "bias"), BatchNorm: ("gamma", "beta"), ReLU: ()}


@dataclass
class Model:
    """An ordered stack of layers producing ``width`` outputs per row."""

    layers: list
    num_classes: int
    mode: str = "eval"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ReLU):
                continue
            if width is not None and layer.in_dim != width:
                raise DimensionError(f"layer {i} expects width {layer.in_dim}, previous layer emits {width}")
            width = layer.out_dim
        if width is None:
            raise ConfigError("a model needs at least one affine layer")

    @property
    def in_dim(self) -> int:
        return next(layer.in_dim for layer in self.layers if not isinstance(layer, ReLU))

    @property
    def width(self) -> int:
        return [layer for layer in self.layers if not isinstance(layer, ReLU)][-1].out_dim

    @property
    def has_bn(self) -> bool:
        return any(isinstance(layer, BatchNorm) for layer in self.layers)

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name in _PARAM_NAMES[type(layer)]:
                out[f"layers.{i}.{name}"] = getattr(layer, name)
        return out

    def get(self, name: str) -> np.ndarray:
        _, i, attr = name.split(".")
        return getattr(self.layers[int(i)], attr)

    def set(self, name: str, value: np.ndarray) -> None:
        _, i, attr = name.split(".")
        layer = self.layers[int(i)]
        old = getattr(layer, attr)
        if value.shape != old.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {old.shape}")
        setattr(layer, attr, value)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for layer in self.layers:
            for name in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
                if hasattr(layer, name):
                    h.update(np.ascontiguousarray(getattr(layer, name), dtype=np.float64).tobytes())
        return h.hexdigest()


def linear_model(in_dim: int, out_dim: int, seed=None, scale: float = 0.0) -> Model:
    """Affine map ``x @ W + b``; weights start at zero unless ``scale > 0``."""
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=scale, size=(in_dim, out_dim)) if scale > 0 else np.zeros((in_dim, out_dim))
    return Model([Affine(w, np.zeros(out_dim))], num_classes=max(out_dim, 2))


def mlp_model(in_dim: int, num_classes: int, hidden=(64, 64), seed=None) -> Model:
    """``in -> [hidden -> BN -> ReLU]* -> num_classes`` with He-normal weights."""
    rng = np.random.default_rng(seed)
    layers, width = [], in_dim
    for h in hidden:
        layers += [Affine(rng.normal(scale=np.sqrt(2.0 / width), size=(width, h)), np.zeros(h)), BatchNorm.of_width(h), ReLU()]
        width = h
    layers.append(Affine(rng.normal(scale=np.sqrt(1.0 / width), size=(width, num_classes)), np.zeros(num_classes)))
    return Model(layers, num_classes=num_classes)


# ----------------------------------------------------------------------------
# forward


def _check_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim or x.shape[0] == 0:
        raise DimensionError(f"expected a non-empty batch of width {model.in_dim}, got shape {x.shape}")
    return x


def forward_t(model: Model, x, stats: str = USE_RUNNING, params: dict | None = None):
    """Differentiable forward pass.

    ``params`` maps parameter names to leaf tensors; parameters not listed
    enter as constants.  Parameters may carry extra leading axes (one
    parameter set per leading index), giving logits of shape
    ``(*lead, n, width)``.  Returns ``(logits, batch_stats)`` where
    ``batch_stats`` lists ``(mean, var)`` per BN layer when ``stats`` is
    ``use_batch``.
    """
    x = _check_input(model, x)
    if stats == USE_BATCH and model.has_bn and x.shape[0] < 2:
        raise ContractError("batch statistics need a batch of at least 2 rows")
    if stats not in (USE_BATCH, USE_RUNNING):
        raise ConfigError(f"unknown stats mode {stats!r}")
    params = params or {}

    def p(i, name):
        key = f"layers.{i}.{name}"
        return params[key] if key in params else Tensor._const(getattr(model.layers[i], name))

    def row(t):  # (*lead, w) parameters broadcast over the batch axis
        return t if t.ndim == 1 else t.reshape(t.shape[:-1] + (1, t.shape[-1]))

    h = Tensor._const(x)
    batch_stats = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Affine):
            h = h @ p(i, "weight") + row(p(i, "bias"))
        elif isinstance(layer, ReLU):
            h = h.relu()
        elif stats == USE_BATCH:
            mean = h.mean(axis=-2, keepdims=True)
            centered = h - mean
            var = (centered * centered).mean(axis=-2, keepdims=True)
            batch_stats.append((mean.data[..., 0, :], var.data[..., 0, :]))
            h = centered / (var + layer.eps).sqrt() * row(p(i, "gamma")) + row(p(i, "beta"))
        else:
            scale = row(p(i, "gamma")) / np.sqrt(layer.running_var + layer.eps)
            h = (h - layer.running_mean) * scale + row(p(i, "beta"))
    return h, batch_stats


def forward(model: Model, x, stats: str = USE_RUNNING) -> np.ndarray:
    """Logits for each row of ``x`` (values only)."""
    return forward_t(model, x, stats)[0].data.copy()


def set_running_stats(model: Model, batch_stats, momentum: float | None = None) -> None:
    """Write per-BN batch statistics into the running buffers.

    ``momentum=None`` replaces them; otherwise an exponential moving average.
    """
    bns = [layer for layer in model.layers if isinstance(layer, BatchNorm)]
    for layer, (mean, var) in zip(bns, batch_stats):
        if momentum is None:
            layer.running_mean, layer.running_var = mean.copy(), var.copy()
        else:
            layer.running_mean = (1 - momentum) * layer.running_mean + momentum * mean
            layer.running_var = (1 - momentum) * layer.running_var + momentum * var


# ----------------------------------------------------------------------------
# parameter selection


@dataclass(frozen=True)
class ParamMask:
    mode: str
    selected: tuple


MASK_MODES = ("bn_only", "all", "bias_only")


def make_mask(model: Model, mode: str = "bn_only") -> ParamMask:
    """Select adaptable parameters: BN scale/shift, every parameter, or affine biases."""
    names = list(model.named_parameters())
    if mode == "all":
        sel = names
    elif mode == "bn_only":
        sel = [n for n in names if n.endswith((".gamma", ".beta"))]
        if not sel:
            raise ConfigError("bn_only mask on a model without batch-norm layers")
    elif mode == "bias_only":
        sel = [n for n in names if n.endswith(".bias")]
    else:
        raise ConfigError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")
    return ParamMask(mode, tuple(sel))


def adaptable_params(model: Model, mask: ParamMask | str) -> dict[str, np.ndarray]:
    """Name -> current value (read-only view) of exactly the masked parameters."""
    if isinstance(mask, str):
        mask = make_mask(model, mask)
    out = {}
    for name in mask.selected:
        v = model.get(name).view()
        v.flags.writeable = False
        out[name] = v
    return out


# ----------------------------------------------------------------------------
# training


def train_source(
    model: Model,
    x,
    labels,
    spec: LossSpec,
    lr: float = 0.1,
    epochs: int = 10,
    batch_size: int = 64,
    seed=0,
    momentum: float = 0.0,
) -> Model:
    """Mini-batch SGD on the mean supervised loss; returns a trained copy.

    Per-epoch mean losses are stored in ``model.info["train_loss"]``.
    """
    x = _check_input(model, x)
    y = encode_labels(spec, labels)
    if len(y) != len(x):
        raise DimensionError("inputs and labels differ in length")
    if model.width != spec.width:
        raise DimensionError(f"model emits {model.width} outputs, loss expects {spec.width}")
    model = model.copy()
    model.info["train_loss"] = []
    if epochs <= 0:
        return model
    rng = np.random.default_rng(seed)
    names = list(model.named_parameters())
    velocity = {n: np.zeros_like(model.get(n)) for n in names}
    n = len(x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            if model.has_bn and len(idx) < 2:
                continue
            leaves = {name: Tensor(model.get(name), requires_grad=True) for name in names}
            logits, bstats = forward_t(model, x[idx], USE_BATCH if model.has_bn else USE_RUNNING, leaves)
            loss = supervised_loss_t(spec, logits, y[idx]).mean()
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {b}")
            grads = grad(loss, [leaves[k] for k in names])
            for name, g in zip(names, grads):
                if momentum:
                    velocity[name] = momentum * velocity[name] + g
                    g = velocity[name]
                new = model.get(name) - lr * g
                if not np.all(np.isfinite(new)):
                    raise DivergenceError(f"non-finite parameter {name} at epoch {epoch}, batch {b}")
                model.set(name, new)
            if bstats:
                set_running_stats(model, bstats, momentum=0.1)
            total += value * len(idx)
            count += len(idx)
        model.info["train_loss"].append(total / max(count, 1))
    return model


def accuracy(model: Model, spec: LossSpec, x, labels, stats: str = USE_RUNNING) -> float:
    from .losses import predict_labels

    pred = predict_labels(spec, forward(model, x, stats))
    return float(np.mean(pred == np.asarray(labels)))


# ----------------------------------------------------------------------------
# persistence


def _layer_desc(layer) -> dict:
    if isinstance(layer, Affine):
        return {"type": "affine", "in": layer.in_dim, "out": layer.out_dim}
    if isinstance(layer, BatchNorm):
        return {"type": "batch_norm", "width": layer.in_dim, "eps": layer.eps, "momentum": layer.momentum}
    return {"type": "relu"}


def model_to_dict(model: Model) -> dict:
    bn = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BatchNorm):
            bn[f"layers.{i}.running_mean"] = layer.running_mean.tolist()
            bn[f"layers.{i}.running_var"] = layer.running_var.tolist()
    return {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "architecture": {"num_classes": model.num_classes, "layers": [_layer_desc(l) for l in model.layers]},
        "parameters": {k: v.tolist() for k, v in model.named_parameters().items()},
        "bn_stats": bn,
    }


def model_from_dict(doc: dict) -> Model:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported model format_version {doc.get('format_version')!r}")
    try:
        arch = doc["architecture"]
        params, bn = doc["parameters"], doc.get("bn_stats", {})
        layers = []
        for i, desc in enumerate(arch["layers"]):
            a = lambda name, src=params: np.asarray(src[f"layers.{i}.{name}"], dtype=np.float64)
            if desc["type"] == "affine":
                layers.append(Affine(a("weight"), a("bias")))
            elif desc["type"] == "batch_norm":
                layers.append(
                    BatchNorm(a("gamma"), a("beta"), a("running_mean", bn), a("running_var", bn), desc["eps"], desc["momentum"])
                )
            elif desc["type"] == "relu":
                layers.append(ReLU())
            else:
                raise ParseError(f"unknown layer type {desc['type']!r}")
        return Model(layers, num_classes=arch["num_classes"])
    except KeyError as exc:
        raise ParseError(f"model document is missing {exc}") from exc


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))
