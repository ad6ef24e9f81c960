import numpy as np
import pytest

from conjtta.autodiff import Tensor, grad, grad_check
from conjtta.datagen import GaussianShiftSpec, make_benchmark
from conjtta.errors import ConfigError, ContractError, DivergenceError
from conjtta.losses import make_loss
from conjtta.models import forward, linear_model, mlp_model, train_source
from conjtta.tta import (
    METHODS,
    TTAConfig,
    adapt_online,
    grid_search,
    hard_pseudolabels,
    make_stream,
    tta_objective,
    tta_step,
)

CE = make_loss("cross_entropy", num_classes=2)


@pytest.fixture(scope="module")
def setup():
    bench = make_benchmark(GaussianShiftSpec(dim=8, seed=3))
    src = bench.dataset("source_train", 100)
    model = train_source(mlp_model(8, 2, hidden=(8, 8), seed=0), src.inputs, src.class_indices(), CE, lr=0.05, epochs=3, seed=0)
    test = bench.dataset("test_stream", 100, lam=0.7)
    return model, make_stream(test.inputs, test.class_indices(), 20), bench


def test_objective_examples():
    h = Tensor([[0.0, 0.0]])
    assert tta_objective("conjugate_pl", CE, h).item() == pytest.approx(np.log(2), abs=1e-15)
    p = Tensor([[0.0, np.log(3)]])  # softmax [0.25, 0.75]
    assert tta_objective("robust_pl", CE, p, {"q": 0.8}).item() == pytest.approx((1 - 0.75**0.8) / 0.8, abs=1e-12)
    # the closed form evaluates to 0.2569776...; see the decisions ledger
    assert tta_objective("hard_pl", CE, p, {"confidence_threshold": 0.9}).item() == 0.0
    assert tta_objective("none", CE, p).item() == 0.0


def test_soft_pl_value_is_entropy_at_own_labels():
    # H(p) = CE(p, p): same value, but the soft-PL gradient treats p as constant
    h = np.random.default_rng(0).normal(size=(20, 3)) * 2
    spec = make_loss("cross_entropy", num_classes=3)
    ent = tta_objective("entropy", spec, Tensor(h)).item()
    soft = tta_objective("soft_pl", spec, Tensor(h)).item()
    assert soft == pytest.approx(ent, abs=1e-12)


def test_objective_validation():
    with pytest.raises(ConfigError):
        tta_objective("entropy", CE, Tensor(np.zeros((2, 3))))
    with pytest.raises(ContractError):
        tta_objective("entropy", CE, Tensor(np.zeros(2)))
    with pytest.raises(ConfigError):
        tta_objective("tent", CE, Tensor(np.zeros((2, 2))))


@pytest.mark.parametrize("method", ["entropy", "soft_pl", "hard_pl", "robust_pl", "conjugate_pl"])
def test_objective_gradients(method):
    rng = np.random.default_rng(1)
    spec = make_loss("cross_entropy", num_classes=3)
    for _ in range(20):
        extras = {"confidence_threshold": 0.0, "label_logits": rng.normal(size=(4, 3)) * 2}
        assert grad_check(lambda h: tta_objective(method, spec, h, extras), rng.normal(size=(4, 3)) * 2) < 1e-5


@pytest.mark.parametrize("kind", ["squared", "polyloss", "exponential"])
def test_conjugate_objective_gradients_other_losses(kind):
    rng = np.random.default_rng(2)
    spec = make_loss(kind)
    for _ in range(20):
        assert grad_check(lambda h: tta_objective("conjugate_pl", spec, h), rng.normal(size=(4, spec.width))) < 1e-5


def test_conjugate_equals_entropy_gradient_ce():
    h = np.random.default_rng(3).normal(size=(6, 4))
    spec = make_loss("cross_entropy", num_classes=4)
    a, b = Tensor(h, requires_grad=True), Tensor(h, requires_grad=True)
    (ga,) = grad(tta_objective("conjugate_pl", spec, a), [a])
    (gb,) = grad(tta_objective("entropy", spec, b), [b])
    np.testing.assert_array_equal(ga, gb)


def test_hard_labels_temperature_invariant():
    for spec in (make_loss("cross_entropy", num_classes=4), make_loss("exponential")):
        h = np.random.default_rng(4).normal(size=(50, spec.width)) * 3
        ref = hard_pseudolabels(spec, h)[0]
        for t in (1.0, 2.0, 5.0):
            np.testing.assert_array_equal(hard_pseudolabels(spec, h / t)[0], ref)


def test_config_validation():
    for bad in ({"method": "x"}, {"lr": -1.0}, {"temperature": 0.0}, {"q": 0.0}, {"confidence_threshold": 2.0},
                {"optimizer": "rmsprop"}, {"bn_stats": "x"}, {"batch_size": 1}):
        with pytest.raises(ConfigError):
            TTAConfig(**bad)


@pytest.mark.parametrize("cfg", [TTAConfig(method="entropy", lr=0.0), TTAConfig(method="none", lr=0.5)])
def test_step_noop(setup, cfg):
    model, stream, _ = setup
    m = model.copy()
    tta_step(m, stream[0][0], CE, TTAConfig(**{**cfg.to_dict(), "bn_stats": "keep"}))
    for name, v in model.named_parameters().items():
        np.testing.assert_array_equal(m.get(name), v)


def test_step_needs_two_rows(setup):
    model, stream, _ = setup
    with pytest.raises(ContractError):
        tta_step(model.copy(), stream[0][0][:1], CE, TTAConfig(method="entropy"))


def test_conjugate_and_entropy_steps_identical(setup):
    model, stream, _ = setup
    a, b = model.copy(), model.copy()
    tta_step(a, stream[0][0], CE, TTAConfig(method="conjugate_pl", lr=0.1))
    tta_step(b, stream[0][0], CE, TTAConfig(method="entropy", lr=0.1))
    assert a.checksum() == b.checksum()


def test_bn_only_leaves_other_weights(setup):
    model, stream, _ = setup
    m = model.copy()
    adapt_online(m, stream * 10, CE, TTAConfig(method="conjugate_pl", lr=0.05))
    changed = [n for n, v in model.named_parameters().items() if not np.array_equal(v, m.get(n))]
    assert changed and all(n.endswith((".gamma", ".beta")) for n in changed)


def test_online_report_none_equals_unadapted(setup):
    model, stream, _ = setup
    r = adapt_online(model.copy(), stream, CE, TTAConfig(method="none"))
    x = np.vstack([b[0] for b in stream])
    y = np.concatenate([b[1] for b in stream])
    assert r.mean_online_error == pytest.approx(np.mean(forward(model, x).argmax(1) != y), abs=1e-15)
    assert r.recomputed_error() == pytest.approx(r.mean_online_error, abs=1e-15)


def test_online_error_zero_when_all_correct():
    m = linear_model(2, 2)
    m.set("layers.0.weight", np.array([[5.0, -5.0], [0.0, 0.0]]))
    x = np.array([[1.0, 0.0], [2.0, 1.0], [-1.0, 0.0]])
    r = adapt_online(m, [(x, np.array([0, 0, 1]))], CE, TTAConfig(method="entropy", mask="all", lr=0.01))
    assert r.mean_online_error == 0.0


def test_report_files(tmp_path, setup):
    model, stream, _ = setup
    r = adapt_online(model.copy(), stream, CE, TTAConfig(method="entropy", lr=0.01))
    r.to_json(tmp_path / "r.json")
    r.to_csv(tmp_path / "r.csv")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == len(stream) + 1


def test_adapt_deterministic(setup):
    model, stream, _ = setup
    cfg = TTAConfig(method="robust_pl", lr=0.05, optimizer="adam")
    a = adapt_online(model.copy(), stream, CE, cfg)
    b = adapt_online(model.copy(), stream, CE, cfg)
    assert a.to_dict() == b.to_dict()


def test_precomputed_labels_differ_from_instantaneous(setup):
    model, stream, _ = setup
    a = adapt_online(model.copy(), stream * 3, CE, TTAConfig(method="hard_pl", lr=0.5, confidence_threshold=0.0))
    b = adapt_online(model.copy(), stream * 3, CE, TTAConfig(method="hard_pl", lr=0.5, confidence_threshold=0.0, precomputed_labels=True))
    assert a.model_checksum != b.model_checksum


def test_make_stream_merges_singleton():
    batches = make_stream(np.zeros((41, 2)), np.zeros(41), 20)
    assert [len(b[0]) for b in batches] == [20, 21]


def test_divergence_raises():
    m = linear_model(2, 2, scale=1.0, seed=0)
    x = np.random.default_rng(0).normal(size=(10, 2))
    stream = make_stream(x, np.zeros(10, dtype=int), 5)
    with pytest.raises(DivergenceError):
        adapt_online(m, stream, make_loss("squared"), TTAConfig(method="conjugate_pl", mask="all", lr=1e300))


def test_grid_single_cell(setup):
    model, stream, _ = setup
    res = grid_search(model, CE, [stream], [0.01], [2.0], TTAConfig(method="entropy"))
    direct = adapt_online(model.copy(), stream, CE, TTAConfig(method="entropy", lr=0.01, temperature=2.0))
    assert (res.best_lr, res.best_temperature, res.best_error) == (0.01, 2.0, direct.mean_online_error)


def test_grid_ties_go_to_smaller_lr_then_t(setup):
    model, stream, _ = setup
    res = grid_search(model, CE, [stream], [0.1, 0.01], [3.0, 1.0], TTAConfig(method="none"))
    assert (res.best_lr, res.best_temperature) == (0.01, 1.0)


def test_grid_divergent_cell_scores_one():
    m = linear_model(2, 2, scale=1.0, seed=0)
    x = np.random.default_rng(0).normal(size=(10, 2))
    stream = make_stream(x, np.zeros(10, dtype=int), 5)
    res = grid_search(m, make_loss("squared"), [stream], [1e300, 1e-3], [1.0], TTAConfig(method="conjugate_pl", mask="all"))
    rows = {r["lr"]: r for r in res.table}
    assert rows[1e300]["error"] == 1.0 and rows[1e300]["diverged"]
    assert res.best_lr == 1e-3


def test_grid_validation(setup):
    model, stream, _ = setup
    with pytest.raises(ConfigError):
        grid_search(model, CE, [stream], [], [1.0])
    with pytest.raises(ConfigError):
        grid_search(model, CE, [], [0.1], [1.0])


def test_all_methods_run_on_exponential():
    spec = make_loss("exponential")
    m = linear_model(3, 1, scale=0.5, seed=1)
    x = np.random.default_rng(5).normal(size=(20, 3))
    stream = make_stream(x, np.where(x[:, 0] > 0, 1, -1), 10)
    for method in METHODS:
        r = adapt_online(m.copy(), stream, spec, TTAConfig(method=method, mask="all", lr=0.1, confidence_threshold=0.0))
        assert 0.0 <= r.mean_online_error <= 1.0
