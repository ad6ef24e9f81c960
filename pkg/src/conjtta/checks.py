"""Invariant suite behind the ``check`` subcommand.

Each check raises ``AssertionError`` on failure and otherwise returns a
short detail string.  Everything runs at small sizes (a few seconds total).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .datagen import GaussianShiftSpec, interpolate_shift, make_benchmark, make_cluster_params, sample_haar_orthogonal
from .losses import (
    KINDS,
    conjugate_loss,
    conjugate_loss_t,
    conjugate_pseudolabel,
    fenchel_gap,
    make_loss,
    supervised_loss,
)
from .meta import MetaConfig, MetaLossNet, outer_gradient
from .models import linear_model, mlp_model, model_from_dict, model_to_dict, train_source
from .tta import TTAConfig, adapt_online, grid_search, hard_pseudolabels, make_stream, tta_objective


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _points(seed: int, n: int, k: int, scale: float = 10.0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-scale, scale, size=(n, k))


def check_softmax_is_logsumexp_gradient() -> str:
    worst = 0.0
    for v in np.random.default_rng(1).normal(size=(100, 5)) * 3:
        t = Tensor(v, requires_grad=True)
        (g,) = ad.grad(t.logsumexp(), [t])
        worst = max(worst, float(np.max(np.abs(g - ad.softmax(v)))))
    assert worst <= 1e-12, worst
    return f"max |grad lse - softmax| = {worst:.1e}"


def check_logsumexp_shift() -> str:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        v, c = rng.normal(size=6), rng.uniform(-1e3, 1e3)
        worst = max(worst, abs(ad.logsumexp(v + c) - ad.logsumexp(v) - c))
    assert worst <= 1e-12, worst
    return f"max shift residual = {worst:.1e}"


def check_fenchel_young() -> str:
    worst_eq, worst_gap = 0.0, 0.0
    for kind in ("cross_entropy", "squared"):
        spec = make_loss(kind, num_classes=4)
        h = _points(3, 100, 4)
        lhs = conjugate_loss(spec, h)
        rhs = supervised_loss(spec, h, conjugate_pseudolabel(spec, h))
        worst_eq = max(worst_eq, float(np.max(np.abs(lhs - rhs))))
        worst_gap = max(worst_gap, float(np.max(fenchel_gap(spec, h))))
    assert worst_eq <= 1e-12 and worst_gap <= 1e-10, (worst_eq, worst_gap)
    return f"equality {worst_eq:.1e}, gap {worst_gap:.1e}"


def check_closed_forms() -> str:
    h = _points(4, 100, 3)
    ce = make_loss("cross_entropy", num_classes=3)
    p = np.exp(h - h.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    ent = -(p * np.log(p)).sum(1)
    e1 = float(np.max(np.abs(conjugate_loss(ce, h) - ent)))
    e2 = float(np.max(np.abs(conjugate_loss(make_loss("squared", num_classes=3), h) + 0.5 * (h * h).sum(1))))
    z = np.random.default_rng(5).uniform(-5, 5, size=(100, 1))
    e3 = float(np.max(np.abs(conjugate_loss(make_loss("exponential"), z) - 2 / (np.exp(z[:, 0]) + np.exp(-z[:, 0])))))
    assert max(e1, e2, e3) <= 1e-12, (e1, e2, e3)
    return f"entropy {e1:.1e}, quadratic {e2:.1e}, exponential {e3:.1e}"


def check_polyloss() -> str:
    worst = 0.0
    for eps in (0.5, 1.0, 6.0):
        for k in (2, 5, 10):
            spec = make_loss("polyloss", {"eps": eps}, num_classes=k)
            worst = max(worst, float(np.max(fenchel_gap(spec, _points(6 + k, 50, k, 5.0)))))
    assert worst <= 1e-8, worst
    h = _points(7, 100, 4, 5.0)
    lim = conjugate_pseudolabel(make_loss("polyloss", {"eps": 1e-8}, num_classes=4), h)
    sm = np.exp(h - h.max(1, keepdims=True))
    sm /= sm.sum(1, keepdims=True)
    dev = float(np.max(np.abs(lim - sm)))
    assert dev < 1e-6, dev
    return f"stationarity {worst:.1e}, eps->0 deviation {dev:.1e}"


def check_pseudolabel_domains() -> str:
    y = conjugate_pseudolabel(make_loss("cross_entropy", num_classes=5), _points(8, 100, 5))
    simplex = float(np.max(np.abs(y.sum(1) - 1)))
    assert simplex <= 1e-12 and np.all(y >= 0), simplex
    t = conjugate_pseudolabel(make_loss("exponential"), _points(9, 100, 1, 15.0))
    assert np.all(np.abs(t) < 1), "exponential label left (-1, 1)"
    return f"simplex residual {simplex:.1e}"


def check_gradients() -> str:
    worst = {}
    rng = np.random.default_rng(10)
    specs = [make_loss(k, num_classes=2 if k == "exponential" else 3) for k in KINDS]
    for spec in specs:
        for _ in range(20):
            pt = rng.normal(size=(2, spec.width)) * 2
            err = grad_check(lambda h, s=spec: conjugate_loss_t(s, h).sum(), pt)
            worst[spec.kind] = max(worst.get(spec.kind, 0.0), err)
    ce = specs[0]
    for method in ("entropy", "soft_pl", "hard_pl", "robust_pl"):
        for _ in range(20):
            pt = rng.normal(size=(4, 3)) * 2
            # constant labels from an independent draw; at the base point itself
            # the soft-PL gradient is exactly zero and relative error is noise
            extras = {"confidence_threshold": 0.0, "label_logits": rng.normal(size=(4, 3)) * 2}
            err = grad_check(lambda h, m=method, e=extras: tta_objective(m, ce, h, e), pt)
            worst[method] = max(worst.get(method, 0.0), err)
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    assert not bad, bad
    return f"max relative error {max(worst.values()):.1e}"


def check_haar() -> str:
    q = sample_haar_orthogonal(100, 11)
    dev = float(np.max(np.abs(q.T @ q - np.eye(100))))
    assert dev < 1e-10, dev
    return f"max |QtQ - I| = {dev:.1e}"


def check_shift_psd() -> str:
    worst = np.inf
    for seed in range(10):
        spec = GaussianShiftSpec(dim=20, seed=seed)
        s, t = make_cluster_params(0, spec, seed), make_cluster_params(1, spec, seed + 100)
        for lam in (0, 0.25, 0.5, 0.6, 0.65, 0.7, 1):
            p = interpolate_shift(s, t, lam)
            for sig in (p.sigma_pos, p.sigma_neg):
                assert np.max(np.abs(sig - sig.T)) <= 1e-12
                worst = min(worst, float(np.linalg.eigvalsh(sig).min()))
    assert worst > 0, worst
    return f"min eigenvalue {worst:.3f}"


def _small_bn_setup():
    bench = make_benchmark(GaussianShiftSpec(dim=8, seed=3))
    src = bench.dataset("source_train", 100)
    spec = make_loss("cross_entropy", num_classes=2)
    model = train_source(mlp_model(8, 2, hidden=(8, 8), seed=0), src.inputs, src.class_indices(), spec, lr=0.05, epochs=3, seed=0)
    test = bench.dataset("test_stream", 100, lam=0.7)
    return spec, model, make_stream(test.inputs, test.class_indices(), 20)


def check_bn_isolation() -> str:
    spec, model, stream = _small_bn_setup()
    adapted = model.copy()
    adapt_online(adapted, stream * 5, spec, TTAConfig(method="conjugate_pl", lr=0.05))
    for name, value in model.named_parameters().items():
        if not (name.endswith("gamma") or name.endswith("beta")):
            assert np.array_equal(value, adapted.get(name)), name
    return f"{len(stream) * 5} batches, non-BN weights bitwise unchanged"


def check_conjugate_equals_entropy() -> str:
    spec, model, stream = _small_bn_setup()
    a, b = model.copy(), model.copy()
    ra = adapt_online(a, stream, spec, TTAConfig(method="conjugate_pl", lr=0.05))
    rb = adapt_online(b, stream, spec, TTAConfig(method="entropy", lr=0.05))
    assert ra.model_checksum == rb.model_checksum and ra.per_batch == rb.per_batch
    return "trajectories bitwise identical"


def check_hard_pl_temperature() -> str:
    for spec in (make_loss("cross_entropy", num_classes=3), make_loss("exponential")):
        h = _points(12, 50, spec.width, 3.0)
        ref, _ = hard_pseudolabels(spec, h)
        for t in (2.0, 5.0):
            assert np.array_equal(hard_pseudolabels(spec, h / t)[0], ref), (spec.kind, t)
    return "hard labels identical for T in {1, 2, 5}"


def check_report_consistency() -> str:
    spec, model, stream = _small_bn_setup()
    r = adapt_online(model.copy(), stream, spec, TTAConfig(method="entropy", lr=0.01))
    dev = abs(r.recomputed_error() - r.mean_online_error)
    assert dev <= 1e-12, dev
    return f"recomputed error deviation {dev:.1e}"


def check_determinism() -> str:
    bench = make_benchmark(GaussianShiftSpec(dim=6, seed=4))
    d = bench.dataset("source_train", 50)
    spec = make_loss("cross_entropy", num_classes=2)
    m1 = train_source(mlp_model(6, 2, hidden=(4,), seed=1), d.inputs, d.class_indices(), spec, epochs=2, seed=5)
    m2 = train_source(mlp_model(6, 2, hidden=(4,), seed=1), d.inputs, d.class_indices(), spec, epochs=2, seed=5)
    assert m1.checksum() == m2.checksum()
    assert model_from_dict(model_to_dict(m1)).checksum() == m1.checksum()
    val = [make_stream(bench.dataset("val_stream", 40, lam=0.6).inputs, bench.dataset("val_stream", 40, lam=0.6).class_indices(), 20)]
    g1 = grid_search(m1, spec, val, [0.1, 0.01], [1, 2], TTAConfig(method="entropy"))
    g2 = grid_search(m1, spec, val, [0.1, 0.01], [1, 2], TTAConfig(method="entropy"))
    assert g1 == g2
    return "training, persistence and grid search reproducible"


def check_outer_gradient_purity() -> str:
    rng = np.random.default_rng(13)
    model = linear_model(4, 2, seed=0, scale=0.5)
    x, y = rng.normal(size=(16, 4)), rng.integers(0, 2, 16)
    net = MetaLossNet(2, hidden=(3, 3), seed=0)
    net = net.with_params(net.phi + 0.1 * rng.normal(size=net.num_params))
    cfg = MetaConfig(iterations=1)
    g1 = outer_gradient(net, model, x, (x, y), cfg)
    g2 = outer_gradient(net, model, x, (x, y), cfg)
    assert np.array_equal(g1, g2)
    return f"{net.num_params} parameters, bitwise-identical repeats"


CHECKS = [
    ("softmax = grad logsumexp", check_softmax_is_logsumexp_gradient),
    ("logsumexp shift identity", check_logsumexp_shift),
    ("Fenchel-Young equality", check_fenchel_young),
    ("closed-form conjugate losses", check_closed_forms),
    ("polyloss stationarity and limit", check_polyloss),
    ("pseudo-label domains", check_pseudolabel_domains),
    ("objective gradients", check_gradients),
    ("Haar orthogonality", check_haar),
    ("shifted covariances PSD", check_shift_psd),
    ("BN-only isolation", check_bn_isolation),
    ("conjugate PL = entropy (CE)", check_conjugate_equals_entropy),
    ("hard PL temperature invariance", check_hard_pl_temperature),
    ("online report consistency", check_report_consistency),
    ("determinism", check_determinism),
    ("outer gradient purity", check_outer_gradient_purity),
]


def run_checks() -> list[CheckResult]:
    out = []
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            detail, ok = fn(), True
        except AssertionError as exc:
            detail, ok = f"FAILED: {exc}", False
        out.append(CheckResult(name, ok, detail, time.perf_counter() - start))
    return out
