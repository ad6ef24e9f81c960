import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conjtta import autodiff as ad
from conjtta.autodiff import Tensor, grad, grad_check, solve
from conjtta.errors import ContractError, DimensionError, NumericalError

finite = st.floats(-50, 50, allow_nan=False)


def test_logsumexp_examples():
    assert ad.logsumexp([0.0, 0.0]) == pytest.approx(np.log(2), abs=1e-15)
    assert ad.logsumexp([0.0, np.log(3)]) == pytest.approx(np.log(4), abs=1e-15)
    assert ad.logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + np.log(2), abs=1e-12)


def test_logsumexp_empty():
    with pytest.raises(DimensionError):
        ad.logsumexp([])


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(ad.softmax([0.0, np.log(3)]), [0.25, 0.75], atol=1e-15)
    for x in (-700.0, 0.0, 3.3, 1e5):
        np.testing.assert_allclose(ad.softmax([x] * 4), [0.25] * 4, atol=1e-15)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-1e3, 1e3))
def test_logsumexp_shift_identity(v, c):
    assert abs(ad.logsumexp(v + c) - ad.logsumexp(v) - c) <= 1e-12 * max(1.0, abs(c))


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_softmax_is_a_distribution(v):
    p = ad.softmax(v)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-12


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-10, 10)))
def test_softmax_is_gradient_of_logsumexp(v):
    t = Tensor(v, requires_grad=True)
    (g,) = grad(t.logsumexp(), [t])
    np.testing.assert_allclose(g, ad.softmax(v), atol=1e-12)


def test_gradient_examples():
    t = Tensor([0.0, 0.0], requires_grad=True)
    (g,) = grad(t.logsumexp(), [t])
    np.testing.assert_allclose(g, [0.5, 0.5], atol=1e-15)

    t = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = grad(0.5 * (t * t).sum(), [t])
    np.testing.assert_array_equal(g, [1.0, 2.0])

    t = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = grad(Tensor(3.0) + Tensor(4.0), [t])
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        grad(t * 2.0, [t])
    with pytest.raises(DimensionError):
        grad(t * 2.0, [t], cotangent=np.ones(2))
    (g,) = grad(t * 2.0, [t], cotangent=np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_shared_subexpression_accumulates():
    t = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    y = t * t
    (g,) = grad((y + y * t).sum(), [t])
    np.testing.assert_allclose(g, 2 * t.data + 3 * t.data**2, atol=1e-14)


def test_grad_check_examples():
    pt = np.random.default_rng(0).standard_normal(5)
    assert grad_check(lambda x: x.logsumexp(), pt) < 1e-6
    assert grad_check(lambda x: 0.5 * (x * x).sum(), [3.0, 4.0]) < 1e-9
    assert grad_check(lambda x: Tensor(2.0) + 0.0 * x.sum(), [1.0, 2.0]) == 0.0


def test_grad_check_bad_step():
    with pytest.raises(ContractError):
        grad_check(lambda x: x.sum(), [1.0], step=0.0)


OPS = {
    "exp": lambda x: x.exp().sum(),
    "log": lambda x: (x * x + 1.0).log().sum(),
    "tanh": lambda x: x.tanh().sum(),
    "sigmoid": lambda x: x.sigmoid().sum(),
    "div": lambda x: (1.0 / (x * x + 2.0)).sum(),
    "pow": lambda x: ((x * x + 1.0) ** 1.5).sum(),
    "sqrt": lambda x: (x * x + 1.0).sqrt().sum(),
    "softmax": lambda x: (x.softmax(axis=-1) * Tensor([1.0, -2.0, 0.5])).sum(),
    "log_softmax": lambda x: (x.log_softmax(axis=-1) * Tensor([1.0, -2.0, 0.5])).sum(),
    "mean_keepdims": lambda x: (x - x.mean(axis=-1, keepdims=True)).exp().sum(),
    "matmul": lambda x: (x.reshape(1, 3) @ Tensor(np.arange(6.0).reshape(3, 2))).exp().sum(),
    "index": lambda x: x[1] * x[2],
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert grad_check(OPS[name], rng.normal(size=3)) < 1e-6


def test_solve_and_gradient():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    b = rng.normal(size=(3, 1))
    np.testing.assert_allclose(solve(Tensor(a), Tensor(b)).data, np.linalg.solve(a, b))
    assert grad_check(lambda t: solve(t.reshape(3, 3), Tensor(b)).sum(), a.reshape(-1)) < 1e-6
    assert grad_check(lambda t: solve(Tensor(a), t.reshape(3, 1)).sum(), b.reshape(-1)) < 1e-6


def test_solve_errors():
    with pytest.raises(NumericalError):
        solve(Tensor(np.zeros((2, 2))), Tensor(np.ones((2, 1))))
    with pytest.raises(DimensionError):
        solve(Tensor(np.eye(2)), Tensor(np.ones((3, 1))))


def test_relu_gradient_away_from_kink():
    assert grad_check(lambda x: x.relu().sum(), [-1.0, 0.5, 2.0]) < 1e-9


def test_topological_order_is_acyclic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    out = ((x * 2.0).exp() + x).sum()
    order = ad.topological_order(out)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node.parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(node)]
    assert order[-1] is out
