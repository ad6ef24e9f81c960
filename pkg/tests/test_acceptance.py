"""Acceptance criteria A1-A8.

Each test emits a single ``A<n> PASS|FAIL ...`` line, collected into an
"acceptance criteria" section of the pytest terminal summary, and then asserts.
"""

import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from conjtta import autodiff as ad
from conjtta.autodiff import grad_check
from conjtta.datagen import GaussianShiftSpec, make_benchmark
from conjtta.experiments import MetaStudyConfig, ToyConfig, meta_template_study, reproduce_appendix_a1
from conjtta.losses import (
    KINDS,
    conjugate_loss,
    conjugate_loss_t,
    conjugate_pseudolabel,
    fenchel_gap,
    make_loss,
    supervised_loss,
)
from conjtta.models import mlp_model, model_to_dict, train_source
from conjtta.tta import TTAConfig, adapt_online, grid_search, hard_pseudolabels, make_stream, tta_objective


def verdict(tag, ok, detail):
    line = f"{tag} {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, f"{tag}: {detail}"


def points(seed, n, k, scale=10.0):
    return np.random.default_rng(seed).uniform(-scale, scale, size=(n, k))


def softmax_rows(h):
    p = np.exp(h - h.max(1, keepdims=True))
    return p / p.sum(1, keepdims=True)


def bn_setup(dim=10, n_test=500, batch=20):
    bench = make_benchmark(GaussianShiftSpec(dim=dim, seed=7))
    src = bench.dataset("source_train", 200)
    spec = make_loss("cross_entropy", num_classes=2)
    model = train_source(mlp_model(dim, 2, hidden=(16, 16), seed=0), src.inputs, src.class_indices(), spec, lr=0.05, epochs=5, seed=0)
    test = bench.dataset("test_stream", n_test, lam=0.7)
    return spec, model, make_stream(test.inputs, test.class_indices(), batch), bench


def test_a1_fenchel_young():
    start = time.perf_counter()
    eq = gap = 0.0
    for kind in ("cross_entropy", "squared"):
        spec = make_loss(kind, num_classes=4)
        h = points(100, 100, 4)
        eq = max(eq, float(np.max(np.abs(conjugate_loss(spec, h) - supervised_loss(spec, h, conjugate_pseudolabel(spec, h))))))
        gap = max(gap, float(np.max(fenchel_gap(spec, h))))
    station = 0.0
    for eps in (0.5, 1.0, 6.0):
        spec = make_loss("polyloss", {"eps": eps}, num_classes=3)
        station = max(station, float(np.max(fenchel_gap(spec, points(101, 50, 3, 5.0)))))
    secs = time.perf_counter() - start
    ok = eq <= 1e-12 and gap <= 1e-10 and station <= 1e-8 and secs < 5
    verdict("A1", ok, f"equality {eq:.1e} gap {gap:.1e} polyloss residual {station:.1e} in {secs:.2f}s")


def test_a2_recovery():
    h = points(200, 100, 3)
    p = softmax_rows(h)
    e_ce = float(np.max(np.abs(conjugate_loss(make_loss("cross_entropy", num_classes=3), h) + (p * np.log(p)).sum(1))))
    e_sq = float(np.max(np.abs(conjugate_loss(make_loss("squared", num_classes=3), h) + 0.5 * (h * h).sum(1))))
    z = points(201, 100, 1, 5.0)
    e_exp = float(np.max(np.abs(conjugate_loss(make_loss("exponential"), z) - 2 / (np.exp(z[:, 0]) + np.exp(-z[:, 0])))))
    verdict("A2", max(e_ce, e_sq, e_exp) <= 1e-12, f"entropy {e_ce:.1e} quadratic {e_sq:.1e} exponential {e_exp:.1e}")


def test_a3_trajectory_equivalence():
    start = time.perf_counter()
    spec, model, stream, _ = bn_setup()
    reports, models = [], []
    for method in ("conjugate_pl", "entropy"):
        m = model.copy()
        reports.append(adapt_online(m, stream, spec, TTAConfig(method=method, lr=0.05, temperature=1.0, seed=3)).to_dict())
        models.append(model_to_dict(m))
    for r in reports:
        r["config"].pop("method")
    secs = time.perf_counter() - start
    same = reports[0] == reports[1] and models[0] == models[1]
    verdict("A3", same and secs < 30, f"{len(stream)} batches identical={same} in {secs:.2f}s")


def test_a4_polyloss_limit():
    h = points(300, 100, 4, 5.0)
    dev = float(np.max(np.abs(conjugate_pseudolabel(make_loss("polyloss", {"eps": 1e-8}, num_classes=4), h) - softmax_rows(h))))
    y0 = conjugate_pseudolabel(make_loss("polyloss", {"eps": 1.0}, num_classes=2), np.zeros(2))
    ok = dev <= 1e-6 and np.allclose(y0, [0.5, 0.5], rtol=0, atol=1e-15)
    verdict("A4", ok, f"eps=1e-8 deviation {dev:.1e}, label at origin {np.asarray(y0).tolist()}")


def test_a5_appendix_reproduction():
    start = time.perf_counter()
    res = reproduce_appendix_a1(range(5), ToyConfig())
    secs = time.perf_counter() - start
    t = res["table"]
    gain = t[(0.7, "conjugate_pl")] - t[(0.7, "none")]
    ent_drop = t[(0.7, "entropy")] <= t[(0.7, "none")]
    low = all(t[(lam, "conjugate_pl")] >= t[(lam, "entropy")] for lam in (0.6, 0.65))
    cells = " ".join(f"{lam}/{m}={t[(lam, m)]:.4f}" for lam in (0.6, 0.65, 0.7) for m in ("none", "entropy", "conjugate_pl"))
    ok = gain >= 0.02 and ent_drop and low and secs < 60
    verdict("A5", ok, f"conjugate gain at 0.7 {100 * gain:.2f} pts, {cells}, {secs:.1f}s")


@pytest.fixture(scope="module")
def meta_runs():
    start = time.perf_counter()
    ce = [meta_template_study(s, MetaStudyConfig(source_loss="cross_entropy")) for s in range(5)]
    sq = [meta_template_study(s, MetaStudyConfig(source_loss="squared")) for s in range(5)]
    return ce, sq, time.perf_counter() - start


def test_a6_meta_learning(meta_runs):
    ce, sq, secs = meta_runs
    reduction = float(np.mean([r.relative_reduction for r in ce]))
    ce_wins = sum(r.entropy_wins for r in ce)
    sq_quad = sum(not r.entropy_wins for r in sq)
    ok = reduction >= 0.05 and ce_wins >= 3 and sq_quad >= 3 and secs < 300
    verdict("A6", ok, f"CE reduction {100 * reduction:.1f}%, entropy template wins {ce_wins}/5 (CE source), "
                      f"quadratic wins {sq_quad}/5 (squared source), {secs:.1f}s")


def test_a7_gradient_oracle():
    rng = np.random.default_rng(700)
    worst = {}
    for kind in KINDS:
        spec = make_loss(kind, num_classes=2 if kind == "exponential" else 3)
        for _ in range(20):
            pt = rng.normal(size=(2, spec.width)) * 2
            worst[kind] = max(worst.get(kind, 0.0), grad_check(lambda h, s=spec: conjugate_loss_t(s, h).sum(), pt))
    ce = make_loss("cross_entropy", num_classes=3)
    for method in ("entropy", "soft_pl", "hard_pl", "robust_pl"):
        for _ in range(20):
            pt = rng.normal(size=(4, 3)) * 2
            extras = {"confidence_threshold": 0.0, "label_logits": rng.normal(size=(4, 3)) * 2}
            worst[method] = max(worst.get(method, 0.0), grad_check(lambda h, m=method, e=extras: tta_objective(m, ce, h, e), pt))
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    verdict("A7", not bad, f"{len(worst)} objectives, max relative error {max(worst.values()):.1e}")


def test_a8_plumbing():
    spec, model, _, bench = bn_setup(n_test=500, batch=20)
    test = bench.dataset("test_stream", 500, lam=0.7)
    stream = make_stream(test.inputs, test.class_indices(), 20)
    adapted = model.copy()
    adapt_online(adapted, stream, spec, TTAConfig(method="conjugate_pl", lr=0.05))
    frozen = all(
        np.array_equal(v, adapted.get(n))
        for n, v in model.named_parameters().items()
        if not (n.endswith("gamma") or n.endswith("beta"))
    )
    moved = any(not np.array_equal(v, adapted.get(n)) for n, v in model.named_parameters().items())

    temp_ok = True
    for s in (make_loss("cross_entropy", num_classes=3), make_loss("exponential")):
        h = points(800, 50, s.width, 3.0)
        ref = hard_pseudolabels(s, h)[0]
        temp_ok &= all(np.array_equal(hard_pseudolabels(s, h / t)[0], ref) for t in (2.0, 5.0))

    val = [make_stream(bench.dataset("val_stream", 60, lam=0.6, stream=i).inputs,
                       bench.dataset("val_stream", 60, lam=0.6, stream=i).class_indices(), 30) for i in range(2)]
    g1 = grid_search(model, spec, val, [0.0, 1e-12], [1.0, 2.0], TTAConfig(method="entropy"))
    g2 = grid_search(model, spec, val, [0.0, 1e-12], [1.0, 2.0], TTAConfig(method="entropy"))
    # lr 0 and 1e-12 tie on error; the rule picks the smaller lr, then smaller T
    tie_ok = g1 == g2 and (g1.best_lr, g1.best_temperature) == (0.0, 1.0)

    r1 = adapt_online(model.copy(), stream, spec, TTAConfig(method="robust_pl", lr=0.05, seed=2)).to_dict()
    r2 = adapt_online(model.copy(), stream, spec, TTAConfig(method="robust_pl", lr=0.05, seed=2)).to_dict()
    ok = frozen and moved and temp_ok and tie_ok and r1 == r2 and len(stream) == 50
    verdict("A8", ok, f"bn isolation {frozen} over {len(stream)} batches, T invariance {temp_ok}, "
                      f"grid tie-break {tie_ok}, rerun identical {r1 == r2}")
