"""Training losses written as ``f(h) - y @ g(h)`` and their conjugates.

Every supported loss is described by a :class:`LossSpec` holding a convex
potential ``f`` over logits and a target-coupling map ``g`` (the identity
for cross-entropy and squared loss).  From a LossSpec we derive

* the conjugate pseudo-label, the ``y`` solving ``Dg(h)^T y = grad f(h)``;
* the conjugate adaptation loss, the supervised loss evaluated at that
  label, which for ``g = id`` equals ``f(h) - h @ grad f(h) = -f*(grad f(h))``.

Functions taking a :class:`~conjtta.autodiff.Tensor` batch of shape
``(n, width)`` return per-sample tensors and are differentiable; the public
value-level functions accept a single logit vector (or a batch) as arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, concat, softmax, solve
from .errors import ConfigError, DimensionError, DomainError, NumericalError

KINDS = ("cross_entropy", "squared", "polyloss", "exponential")

# Above this condition number the polyloss label solve is reported as singular.
_MAX_CONDITION = 1e12


@dataclass(frozen=True)
class LossSpec:
    """A loss in expanded conjugate form.

    ``width`` is the number of model outputs: ``num_classes`` for the
    multiclass kinds and 1 for the exponential loss, whose model emits a
    single score ``z`` with labels in ``{-1, +1}``.
    """

    kind: str
    num_classes: int
    params: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return 1 if self.kind == "exponential" else self.num_classes

    @property
    def eps(self) -> float:
        return float(self.params.get("eps", 0.0))

    @property
    def identity_coupling(self) -> bool:
        return self.kind in ("cross_entropy", "squared")

    # -- value-level pieces (last axis = logits) ----------------------------
    def f(self, h):
        h = np.asarray(h, dtype=np.float64)
        if self.kind in ("cross_entropy", "polyloss"):
            m = h.max(axis=-1, keepdims=True)
            return np.squeeze(m, -1) + np.log(np.exp(h - m).sum(axis=-1))
        if self.kind == "squared":
            return 0.5 * (h * h).sum(axis=-1)
        return np.cosh(h).sum(axis=-1)

    def grad_f(self, h):
        h = np.asarray(h, dtype=np.float64)
        if self.kind in ("cross_entropy", "polyloss"):
            return softmax(h)
        if self.kind == "squared":
            return h.copy()
        return np.sinh(h)

    def g(self, h):
        h = np.asarray(h, dtype=np.float64)
        if self.kind == "polyloss":
            return h - self.eps * (1.0 - softmax(h))
        if self.kind == "exponential":
            return np.sinh(h)
        return h.copy()

    def jac_g(self, h):
        """Jacobian ``Dg(h)`` with ``[i, j] = d g_i / d h_j`` (batched on leading axes)."""
        h = np.asarray(h, dtype=np.float64)
        k = h.shape[-1]
        eye = np.broadcast_to(np.eye(k), h.shape[:-1] + (k, k))
        if self.kind == "polyloss":
            z = softmax(h)
            return eye + self.eps * (z[..., :, None] * eye - z[..., :, None] * z[..., None, :])
        if self.kind == "exponential":
            return np.cosh(h)[..., None] * eye
        return eye.copy()

    # -- differentiable pieces on (n, width) tensors ----------------------
    def f_t(self, h: Tensor) -> Tensor:
        if self.kind in ("cross_entropy", "polyloss"):
            return h.logsumexp(axis=-1)
        if self.kind == "squared":
            return 0.5 * (h * h).sum(axis=-1)
        return (0.5 * (h.exp() + (-h).exp())).sum(axis=-1)

    def g_t(self, h: Tensor) -> Tensor:
        if self.kind == "polyloss":
            return h - self.eps * (1.0 - h.softmax(axis=-1))
        if self.kind == "exponential":
            return 0.5 * (h.exp() - (-h).exp())
        return h


def make_loss(kind: str, params: dict | None = None, num_classes: int = 2) -> LossSpec:
    """Build a :class:`LossSpec`; ``params`` carries ``eps`` for polyloss."""
    params = dict(params or {})
    if kind not in KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}; expected one of {KINDS}")
    if kind == "exponential":
        if num_classes != 2:
            raise ConfigError("exponential loss is defined for binary scalar-score models only (num_classes=2)")
    elif num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if kind == "polyloss":
        eps = float(params.get("eps", 1.0))
        if not eps >= 0:
            raise ConfigError(f"polyloss eps must be >= 0, got {eps}")
        params["eps"] = eps
    elif params:
        raise ConfigError(f"loss {kind!r} takes no parameters, got {sorted(params)}")
    return LossSpec(kind=kind, num_classes=int(num_classes), params=params)


# ----------------------------------------------------------------------------
# differentiable batch versions


def softmax_entropy(h: Tensor) -> Tensor:
    """Per-row Shannon entropy of ``softmax(h)`` (``0 log 0 = 0`` by construction)."""
    logp = h.log_softmax(axis=-1)
    return -(logp.exp() * logp).sum(axis=-1)


def class_logits(spec: LossSpec, h: Tensor) -> Tensor:
    """Logits over classes; a scalar score ``z`` becomes ``[0, z]`` so that
    ``softmax`` gives ``P(y=+1) = sigmoid(z)``."""
    if spec.kind == "exponential":
        return concat([Tensor._const(np.zeros(h.shape)), h], axis=-1)
    return h


def supervised_loss_t(spec: LossSpec, h: Tensor, y) -> Tensor:
    """Per-sample ``f(h) - y @ g(h)``."""
    y = as_tensor(y)
    if y.shape != h.shape:
        raise DimensionError(f"labels shape {y.shape} does not match logits {h.shape}")
    return spec.f_t(h) - (y * spec.g_t(h)).sum(axis=-1)


def pseudolabel_t(spec: LossSpec, h: Tensor) -> Tensor:
    """Conjugate pseudo-labels as a differentiable function of ``h``."""
    if spec.kind == "cross_entropy":
        return h.softmax(axis=-1)
    if spec.kind == "squared":
        return h
    if spec.kind == "exponential":
        return h.tanh()
    z = h.softmax(axis=-1)
    k = spec.num_classes
    eye = np.eye(k)
    zc = z.reshape(z.shape + (1,))
    zr = z.reshape(z.shape[:-1] + (1, k))
    a = eye + spec.eps * (zc * eye - zc * zr)
    _check_conditioning(a.data)
    return solve(a, zc).reshape(z.shape)


def conjugate_loss_t(spec: LossSpec, h: Tensor) -> Tensor:
    """Per-sample conjugate adaptation loss with gradient through the label.

    For ``g = id`` this is ``-f*(grad f(h))`` via the closed-form conjugate
    (softmax entropy, ``-||h||^2 / 2``); otherwise the supervised loss at the
    conjugate pseudo-label.
    """
    if spec.kind == "cross_entropy":
        return softmax_entropy(h)
    if spec.kind == "squared":
        return -0.5 * (h * h).sum(axis=-1)
    return supervised_loss_t(spec, h, pseudolabel_t(spec, h))


def self_training_loss_t(spec: LossSpec, h: Tensor) -> Tensor:
    """Supervised loss against the pseudo-label held constant.

    Same value as :func:`conjugate_loss_t`, but the gradient with respect to
    ``h`` vanishes: the label satisfies the stationarity condition of the
    supervised loss at ``h``.
    """
    return supervised_loss_t(spec, h, pseudolabel_t(spec, h).detach())


# ----------------------------------------------------------------------------
# value-level API


def _batch(spec: LossSpec, h) -> tuple[np.ndarray, bool]:
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim <= 1
    h = np.atleast_1d(h)
    if single:
        h = h[None, :]
    if h.ndim != 2 or h.shape[-1] != spec.width:
        raise DimensionError(f"expected logits of width {spec.width}, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise NumericalError("logits must be finite")
    return h, single


def _out(v: np.ndarray, single: bool):
    return float(v[0]) if single else v


def _check_conditioning(a: np.ndarray) -> None:
    cond = np.linalg.cond(a)
    worst = float(np.max(cond))
    if not np.isfinite(worst) or worst > _MAX_CONDITION:
        raise NumericalError(f"singular pseudo-label system (condition estimate {worst:.3g})")


def supervised_loss(spec: LossSpec, h, y):
    """``f(h) - y @ g(h)`` for one logit vector (float) or a batch (array)."""
    hb, single = _batch(spec, h)
    y = np.asarray(y, dtype=np.float64).reshape(hb.shape) if np.size(y) == hb.size else None
    if y is None:
        raise DimensionError(f"labels do not match logits of shape {hb.shape}")
    return _out(spec.f(hb) - (y * spec.g(hb)).sum(axis=-1), single)


def conjugate_pseudolabel(spec: LossSpec, h) -> np.ndarray:
    """Solve ``Dg(h)^T y = grad f(h)`` (just ``grad f(h)`` when ``g = id``)."""
    hb, single = _batch(spec, h)
    gf = spec.grad_f(hb)
    if spec.identity_coupling:
        y = gf
    else:
        jt = np.swapaxes(spec.jac_g(hb), -1, -2)
        _check_conditioning(jt)
        y = np.linalg.solve(jt, gf[..., None])[..., 0]
    return y[0] if single else y


def conjugate(spec: LossSpec, y) -> float | np.ndarray:
    """Closed-form convex conjugate ``f*(y)`` for the ``g = id`` losses.

    For cross-entropy ``f*`` is the negative entropy on the simplex; inputs
    farther than 1e-9 from the simplex raise :class:`DomainError`.
    """
    y = np.asarray(y, dtype=np.float64)
    if spec.kind == "squared":
        return 0.5 * (y * y).sum(axis=-1)
    if spec.kind != "cross_entropy":
        raise ConfigError(f"no closed-form conjugate implemented for {spec.kind!r}")
    if np.any(y < -1e-9) or np.any(np.abs(y.sum(axis=-1) - 1.0) > 1e-9):
        raise DomainError("cross-entropy conjugate is infinite off the probability simplex")
    safe = np.where(y > 0, y, 1.0)
    return np.where(y > 0, y * np.log(safe), 0.0).sum(axis=-1)


def conjugate_loss(spec: LossSpec, h):
    """Conjugate adaptation loss value at ``h``."""
    hb, single = _batch(spec, h)
    return _out(conjugate_loss_t(spec, Tensor(hb)).data, single)


def fenchel_gap(spec: LossSpec, h):
    """Optimality residual of the conjugate pseudo-label.

    ``g = id``: ``|f(h) - h @ grad f(h) + f*(grad f(h))|``.
    Expanded form: ``||grad f(h) - Dg(h)^T y||_inf``.
    """
    hb, single = _batch(spec, h)
    y = conjugate_pseudolabel(spec, hb)
    if spec.identity_coupling:
        gap = np.abs(spec.f(hb) - (hb * y).sum(axis=-1) + conjugate(spec, y))
    else:
        jt = np.swapaxes(spec.jac_g(hb), -1, -2)
        gap = np.abs(spec.grad_f(hb) - (jt @ y[..., None])[..., 0]).max(axis=-1)
    return _out(gap, single)


# ----------------------------------------------------------------------------
# labels


def encode_labels(spec: LossSpec, labels) -> np.ndarray:
    """One-hot rows for multiclass kinds, a ``(n, 1)`` column of ±1 for exponential."""
    labels = np.asarray(labels)
    if spec.kind == "exponential":
        if not np.all(np.isin(labels, (-1, 1))):
            raise ConfigError("exponential loss needs labels in {-1, +1}")
        return labels.astype(np.float64).reshape(-1, 1)
    idx = labels.astype(int)
    if np.any(idx != labels) or np.any(idx < 0) or np.any(idx >= spec.num_classes):
        raise ConfigError(f"class labels must be integers in [0, {spec.num_classes})")
    return np.eye(spec.num_classes)[idx]


def predict_labels(spec: LossSpec, logits: np.ndarray) -> np.ndarray:
    """Class indices, or ±1 for the scalar-score model (``z >= 0`` maps to +1)."""
    logits = np.asarray(logits)
    if spec.kind == "exponential":
        return np.where(logits[:, 0] >= 0, 1, -1)
    return np.argmax(logits, axis=1)
