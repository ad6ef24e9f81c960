"""Meta-learning a test-time adaptation loss over logits.

The loss network scores a logit vector ``h`` as

    m(h) = sum_k mlp([h_k, logsumexp(h)])

with one small two-hidden-layer ``tanh`` MLP shared across classes, so it is
invariant to permutations of the classes.  Training alternates one inner
gradient step of the source model on ``m`` (unlabeled batch) with an outer
step on the network parameters, the outer gradient being taken by central
finite differences of the post-step task loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .autodiff import Tensor, grad
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, ParseError
from .losses import LossSpec, encode_labels, softmax_entropy, supervised_loss_t
from .models import FORMAT_VERSION, USE_BATCH, USE_RUNNING, Model, forward_t, make_mask

MAX_PARAMS = 512


class MetaLossNet:
    """Shared per-class MLP over ``[h_k, logsumexp(h)]``.

    Parameters live in one flat vector ``phi``; the layout is
    ``W1 (2, w1), b1, W2 (w1, w2), b2, w3 (w2,), b3``.
    """

    def __init__(self, num_classes: int, hidden=(8, 8), phi=None, seed=None, init_scale: float = 0.5):
        self.num_classes = int(num_classes)
        self.hidden = tuple(int(w) for w in hidden)
        if len(self.hidden) != 2 or max(self.hidden) > 16:
            raise ConfigError("the loss net has two hidden layers of width <= 16")
        if self.num_params > MAX_PARAMS:
            raise ConfigError(f"{self.num_params} parameters exceed the budget of {MAX_PARAMS}")
        if phi is None:
            phi = self._init(np.random.default_rng(seed), init_scale)
        phi = np.array(phi, dtype=np.float64)
        if phi.shape != (self.num_params,):
            raise DimensionError(f"expected {self.num_params} parameters, got shape {phi.shape}")
        self.phi = phi

    @property
    def shapes(self) -> list[tuple]:
        w1, w2 = self.hidden
        return [(2, w1), (w1,), (w1, w2), (w2,), (w2,), ()]

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)

    def _init(self, rng, scale) -> np.ndarray:
        w1, w2 = self.hidden
        parts = [
            rng.normal(scale=scale, size=(2, w1)),
            rng.normal(scale=scale, size=w1),
            rng.normal(scale=1.0 / np.sqrt(w1), size=(w1, w2)),
            np.zeros(w2),
            np.zeros(w2),  # zero output layer: m == 0 at initialization
            np.zeros(()),
        ]
        return np.concatenate([np.ravel(p) for p in parts])

    def unpack(self, phi=None) -> list[np.ndarray]:
        phi = self.phi if phi is None else phi
        out, i = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(phi[i : i + n].reshape(s))
            i += n
        return out

    def with_params(self, phi) -> "MetaLossNet":
        return MetaLossNet(self.num_classes, self.hidden, phi)

    def copy(self) -> "MetaLossNet":
        return self.with_params(self.phi.copy())

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "meta_loss_net",
            "architecture": {"num_classes": self.num_classes, "hidden": list(self.hidden)},
            "parameters": self.phi.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetaLossNet":
        if doc.get("format_version") != FORMAT_VERSION or doc.get("kind") != "meta_loss_net":
            raise ParseError("not a version-1 meta_loss_net document")
        arch = doc["architecture"]
        return cls(arch["num_classes"], arch["hidden"], phi=doc["parameters"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MetaLossNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _scores(weights, h: Tensor) -> Tensor:
    """Per-row loss for logits ``h`` of shape ``(*lead, n, K)``.

    ``weights`` come from :meth:`MetaLossNet.unpack`, optionally with the same
    leading axes ``lead`` (one parameter set per leading index).
    """
    w1, b1, w2, b2, w3, b3 = weights
    lead = w1.shape[:-2]
    pad = lambda a: a.reshape(lead + (1, 1) + a.shape[len(lead):])  # broadcast over (n, K)
    pad_mm = lambda a: a.reshape(lead + (1,) + a.shape[len(lead):])  # matmul over (n,) batch
    lse = h.logsumexp(axis=-1, keepdims=True).reshape(h.shape[:-1] + (1, 1))
    a = h.reshape(h.shape + (1,)) * pad(w1[..., 0, :]) + lse * pad(w1[..., 1, :]) + pad(b1)
    a = (a.tanh() @ pad_mm(w2) + pad(b2)).tanh()
    out = a @ pad_mm(w3[..., None]) + pad(b3[..., None])
    return out.reshape(h.shape).sum(axis=-1)


def meta_loss_t(net: MetaLossNet, h: Tensor) -> Tensor:
    """Per-row ``m(h)`` for a ``(n, K)`` logit tensor (differentiable in ``h``)."""
    if h.ndim != 2 or h.shape[1] != net.num_classes:
        raise DimensionError(f"expected (n, {net.num_classes}) logits, got {h.shape}")
    return _scores(net.unpack(), h)


def meta_loss_eval(net: MetaLossNet, h) -> float:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (net.num_classes,):
        raise DimensionError(f"expected a logit vector of length {net.num_classes}, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ContractError("logits must be finite")
    return float(meta_loss_t(net, Tensor(h[None, :])).data[0])


# ----------------------------------------------------------------------------
# inner / outer steps


@dataclass
class MetaConfig:
    alpha: float = 0.5
    beta: float = 0.1
    iterations: int = 200
    task_loss: str = "cross_entropy"
    fd_step: float = 1e-3
    batch_size: int = 64
    mask: str = "all"
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "fd_step"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.task_loss not in TASK_LOSSES:
            raise ConfigError(f"unknown task loss {self.task_loss!r}; expected one of {list(TASK_LOSSES)}")

    def to_dict(self) -> dict:
        return asdict(self)


class _InnerStep:
    """Model graph on one unlabeled batch, reused across loss networks.

    The logits do not depend on the loss network, so each probe only needs
    ``dm/dh`` at those logits, pulled back through the cached graph.
    """

    def __init__(self, model: Model, batch, mask: str):
        self.model = model
        self.batch = np.asarray(batch, dtype=np.float64)
        self.stats = USE_BATCH if model.has_bn else USE_RUNNING
        self.names = make_mask(model, mask).selected
        self.leaves = {n: Tensor(model.get(n), requires_grad=True) for n in self.names}
        self.logits, _ = forward_t(model, self.batch, self.stats, self.leaves)
        self.h = self.logits.detach()

    def _apply(self, dm_dh: np.ndarray, alpha: float) -> dict[str, np.ndarray]:
        grads = grad(self.logits, [self.leaves[n] for n in self.names], cotangent=dm_dh)
        out = {}
        for name, g in zip(self.names, grads):
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite meta-loss gradient for {name}")
            out[name] = self.model.get(name) - alpha * g
        return out

    def params(self, net: MetaLossNet, alpha: float) -> dict[str, np.ndarray]:
        if alpha == 0:
            return {n: self.model.get(n) for n in self.names}
        h = Tensor(self.h.data, requires_grad=True)
        (dm_dh,) = grad(meta_loss_t(net, h).mean(), [h])
        return self._apply(dm_dh, alpha)

    def probe_objectives(self, net: MetaLossNet, phis: np.ndarray, alpha: float, spec: LossSpec, labeled) -> np.ndarray:
        """Post-step task loss for each row of ``phis``.

        All probes share one graph: the model parameters are tiled along a
        leading probe axis, so one reverse sweep yields every probe's step.
        """
        p = len(phis)
        weights = [np.stack(parts) for parts in zip(*(net.unpack(phi) for phi in phis))]
        h = Tensor(np.broadcast_to(self.h.data, (p,) + self.h.shape), requires_grad=True)
        (dm_dh,) = grad(_scores(weights, h).mean(axis=-1).sum(), [h])
        tiled = {n: Tensor(np.broadcast_to(self.model.get(n), (p,) + self.model.get(n).shape), requires_grad=True) for n in self.names}
        logits, _ = forward_t(self.model, self.batch, self.stats, tiled)
        grads = grad(logits, [tiled[n] for n in self.names], cotangent=dm_dh)
        new = {n: Tensor._const(self.model.get(n) - alpha * g) for n, g in zip(self.names, grads)}
        x, labels = labeled
        out = forward_t(self.model, x, self.stats, new)[0]
        y = np.broadcast_to(spec.encode(labels), out.shape)
        with np.errstate(all="ignore"):
            values = spec.loss_t(out, y).mean(axis=-1).data
        return np.where(np.isfinite(values), values, np.nan)


def inner_update(model: Model, batch, net: MetaLossNet, alpha: float, mask: str = "all") -> Model:
    """Copy of ``model`` after one gradient step on the mean meta-loss."""
    out = model.copy()
    for name, value in _InnerStep(model, batch, mask).params(net, alpha).items():
        out.set(name, value)
    return out


@dataclass(frozen=True)
class TaskLoss:
    """Outer (labeled) loss.  ``name`` is a loss kind, or ``squared_prob``
    for half the squared error between softmax probabilities and one-hot labels."""

    name: str
    num_classes: int
    params: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.name not in TASK_LOSSES:
            raise ConfigError(f"unknown task loss {self.name!r}; expected one of {sorted(TASK_LOSSES)}")

    @property
    def spec(self) -> LossSpec:
        from .losses import make_loss

        kind = "squared" if self.name == "squared_prob" else self.name
        return make_loss(kind, dict(self.params or {}), num_classes=self.num_classes)

    @property
    def shift_invariant(self) -> bool:
        """True when adding a constant to every logit leaves the loss unchanged."""
        return self.name in ("cross_entropy", "polyloss", "squared_prob")

    def encode(self, labels) -> np.ndarray:
        return encode_labels(self.spec, labels)

    def loss_t(self, h: Tensor, y) -> Tensor:
        if self.name == "squared_prob":
            d = h.softmax(axis=-1) - y
            return (d * d).sum(axis=-1) * 0.5
        return supervised_loss_t(self.spec, h, y)


TASK_LOSSES = ("cross_entropy", "squared", "polyloss", "exponential", "squared_prob")


def _as_task(spec, num_classes: int) -> TaskLoss:
    if isinstance(spec, TaskLoss):
        return spec
    if isinstance(spec, LossSpec):
        return TaskLoss(spec.kind, spec.num_classes, dict(spec.params))
    return TaskLoss(spec, num_classes)


def task_loss_value(spec, model: Model, x, labels, params: dict | None = None) -> float:
    """Mean task loss of ``model`` (optionally with overridden parameters).

    ``spec`` is a :class:`TaskLoss`, a :class:`LossSpec` or a task-loss name.
    """
    task = _as_task(spec, model.num_classes)
    stats = USE_BATCH if model.has_bn else USE_RUNNING
    consts = {k: Tensor._const(v) for k, v in (params or {}).items()}
    logits = forward_t(model, x, stats, consts)[0]
    return float(task.loss_t(logits, task.encode(labels)).mean().item())


def outer_objective(phi, net: MetaLossNet, model: Model, unlabeled, labeled, spec, config: MetaConfig, _step=None) -> float:
    """Task loss on ``labeled`` after one inner step with parameters ``phi``."""
    step = _step or _InnerStep(model, unlabeled, config.mask)
    return task_loss_value(spec, model, *labeled, params=step.params(net.with_params(phi), config.alpha))


def outer_gradient(net: MetaLossNet, model: Model, unlabeled, labeled, config: MetaConfig, spec=None) -> np.ndarray:
    """Central finite-difference gradient of :func:`outer_objective` in ``phi``.

    ``labeled`` is an ``(x, labels)`` pair.  Every probe starts from the
    unmodified ``model``, so the result is a pure function of its inputs.
    """
    if net.num_params > MAX_PARAMS:
        raise ContractError("finite-difference budget exceeded")
    spec = _as_task(spec, net.num_classes) if spec is not None else _task_spec(config, net.num_classes)
    step = _InnerStep(model, unlabeled, config.mask)
    phi0, h = net.phi, config.fd_step
    p = phi0.size
    probes = np.concatenate([phi0 + h * np.eye(p), phi0 - h * np.eye(p)])
    values = step.probe_objectives(net, probes, config.alpha, spec, labeled)
    bad = ~np.isfinite(values)
    if bad.any():
        raise DivergenceError(f"non-finite outer objective probing parameter {int(np.flatnonzero(bad)[0]) % p}")
    return (values[:p] - values[p:]) / (2 * h)


def _task_spec(config: MetaConfig, num_classes: int) -> TaskLoss:
    return TaskLoss(config.task_loss, num_classes)


@dataclass
class MetaResult:
    net: MetaLossNet
    trajectory: list  # outer objective per iteration (before that iteration's update)
    improved: bool
    flag: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"trajectory": self.trajectory, "improved": self.improved, "flag": self.flag, **self.extra}


def meta_train(net: MetaLossNet, model: Model, shift_streams, config: MetaConfig) -> MetaResult:
    """Alternate inner steps and finite-difference outer steps.

    ``shift_streams`` is a list of labeled validation sets ``(x, labels)``.
    Each iteration draws one set and a batch from it (seeded), adapts a
    fresh copy of ``model`` on the batch and scores the adapted model on the
    same batch with its labels.
    """
    if not shift_streams:
        raise ConfigError("need at least one validation stream")
    spec = _task_spec(config, net.num_classes)
    rng = np.random.default_rng(config.seed)
    net = net.copy()
    traj = []
    for _ in range(config.iterations):
        x, y = shift_streams[rng.integers(len(shift_streams))]
        idx = rng.choice(len(x), size=min(config.batch_size, len(x)), replace=False)
        xb, yb = x[idx], np.asarray(y)[idx]
        traj.append(outer_objective(net.phi, net, model, xb, (xb, yb), spec, config))
        g = outer_gradient(net, model, xb, (xb, yb), config, spec)
        norm = np.linalg.norm(g)
        if config.grad_clip and norm > config.grad_clip:
            g = g * (config.grad_clip / norm)
        net = net.with_params(net.phi - config.beta * g)
    if not traj:
        return MetaResult(net, [], True)
    window = max(1, len(traj) // 10)
    improved = float(np.mean(traj[-window:])) <= float(np.mean(traj[:window]))
    return MetaResult(net, traj, improved, "" if improved else "NOT_IMPROVED")


def held_out_task_loss(net: MetaLossNet, model: Model, x, labels, config: MetaConfig) -> float:
    """Mean post-step task loss over consecutive held-out batches."""
    spec = _task_spec(config, net.num_classes)
    vals = []
    for start in range(0, len(x) - 1, config.batch_size):
        xb, yb = x[start : start + config.batch_size], np.asarray(labels)[start : start + config.batch_size]
        if len(xb) < 2:
            continue
        vals.append(outer_objective(net.phi, net, model, xb, (xb, yb), spec, config))
    return float(np.mean(vals))


# ----------------------------------------------------------------------------
# slices and template fits


def slice_export(objective, base, dim: int, value_range=(-5.0, 5.0), steps: int = 101) -> np.ndarray:
    """Sweep coordinate ``dim`` of ``base`` over ``value_range``.

    ``objective`` is a :class:`MetaLossNet` or any callable mapping an
    ``(n, K)`` logit tensor to per-row values or to a scalar.  Returns an
    array of ``(x, loss)`` rows.
    """
    base = np.asarray(base, dtype=np.float64)
    if steps < 2:
        raise ContractError("steps must be >= 2")
    if not 0 <= dim < base.size:
        raise DimensionError(f"dim {dim} out of bounds for a vector of length {base.size}")
    xs = np.linspace(value_range[0], value_range[1], steps)
    h = np.tile(base, (steps, 1))
    h[:, dim] = xs
    if isinstance(objective, MetaLossNet):
        ys = meta_loss_t(objective, Tensor(h)).data
    else:
        ys = np.array([np.asarray(objective(Tensor(row[None, :])).data).reshape(-1)[0] for row in h])
    return np.column_stack([xs, ys])


def centered_objective(net: MetaLossNet, level: float = 0.0):
    """``h -> m(h - mean(h) + level)``, a callable for :func:`slice_export`.

    A softmax-based task loss cannot see a shift of all logits by the same
    amount, so the part of ``m`` that varies along that direction is not
    determined by meta-training.  This view pins the logit mean at
    ``level``; entropy and quadratic templates keep their form under it.
    """

    def objective(h: Tensor) -> Tensor:
        return meta_loss_t(net, h - h.mean(axis=-1, keepdims=True) + level)

    return objective


def save_slice_csv(curve: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        fh.write("x,loss\n")
        for x, y in curve:
            fh.write(f"{x!r},{y!r}\n")


@dataclass
class FittedEntropyParams:
    alpha_mag: float
    temperature: float
    offset: float
    residual: float


@dataclass
class FittedQuadratic:
    a: float
    b: float
    c: float
    residual: float


def _entropy_column(xs, base, dim, t):
    h = np.tile(np.asarray(base, dtype=np.float64), (len(xs), 1))
    h[:, dim] = xs
    return softmax_entropy(Tensor(h / t)).data


def _lsq(col, ys):
    a = np.column_stack([col, np.ones_like(col)])
    coef, *_ = np.linalg.lstsq(a, ys, rcond=None)
    r = ys - a @ coef
    return coef, float(r @ r)


def fit_scaled_entropy(curve: np.ndarray, base, dim: int) -> FittedEntropyParams:
    """Least-squares fit of ``alpha * H(softmax(h / T)) + c`` to a slice.

    ``T`` is searched on a log grid over [0.1, 10] and refined with a
    bounded scalar search; ``alpha`` and ``c`` are solved in closed form.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if len(curve) < 10:
        raise ContractError("need at least 10 curve points")
    xs, ys = curve[:, 0], curve[:, 1]
    if np.ptp(ys) <= 1e-12 * max(1.0, float(np.max(np.abs(ys)))):
        return FittedEntropyParams(0.0, 1.0, float(np.mean(ys)), 0.0)

    def sse(log_t):
        return _lsq(_entropy_column(xs, base, dim, np.exp(log_t)), ys)[1]

    grid = np.linspace(np.log(0.1), np.log(10.0), 81)
    vals = [sse(v) for v in grid]
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    best = minimize_scalar(sse, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    log_t = best.x if best.fun <= vals[i] else grid[i]
    (alpha, c), res = _lsq(_entropy_column(xs, base, dim, np.exp(log_t)), ys)
    return FittedEntropyParams(float(alpha), float(np.exp(log_t)), float(c), res)


def fit_quadratic(curve: np.ndarray) -> FittedQuadratic:
    """Least-squares ``a x^2 + b x + c``."""
    curve = np.asarray(curve, dtype=np.float64)
    xs, ys = curve[:, 0], curve[:, 1]
    a = np.column_stack([xs**2, xs, np.ones_like(xs)])
    coef, *_ = np.linalg.lstsq(a, ys, rcond=None)
    r = ys - a @ coef
    return FittedQuadratic(*map(float, coef), residual=float(r @ r))
