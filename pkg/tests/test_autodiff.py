import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttattack import autodiff as ad
from ttattack.autodiff import Tensor

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def weighted(out: Tensor, seed: int = 0) -> Tensor:
    """Scalarize with fixed random weights so every output coordinate matters."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum(out * w)


def test_relu_softmax_mean_examples():
    assert np.array_equal(ad.relu([-1.0, 2.0]).data, [0.0, 2.0])
    np.testing.assert_allclose(ad.softmax(np.zeros((1, 3))).data, [[1 / 3] * 3], atol=1e-15)
    x = Tensor([1.0, 3.0], requires_grad=True)
    m = ad.mean(x)
    assert m.item() == 2.0
    np.testing.assert_array_equal(ad.backward(m, [x])[x], [0.5, 0.5])


def test_sum_gradient_is_ones_and_square_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    np.testing.assert_array_equal(ad.backward(ad.sum(x), [x])[x], np.ones((2, 3)))
    y = Tensor(3.0, requires_grad=True)
    assert ad.backward(y * y, [y])[y] == 6.0


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_repeated_backward_identical_and_fresh():
    x = Tensor(np.linspace(-1, 1, 6).reshape(3, 2), requires_grad=True)
    root = ad.sum(ad.softmax(x @ np.ones((2, 4))) * np.arange(4.0))
    g1 = ad.backward(root, [x])
    g2 = ad.backward(root, [x])
    assert g1 is not g2
    assert np.array_equal(g1[x], g2[x])


def test_unreachable_leaf_gets_zero_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    z = Tensor(np.ones(3), requires_grad=True)
    g = ad.backward(ad.sum(x * 2.0), [x, z])
    np.testing.assert_array_equal(g[z], np.zeros(3))


def test_shape_error_names_primitive():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))


def test_row_broadcast_gradient_sums_over_rows():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    g = ad.backward(weighted(x + b), [b])[b]
    w = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(g, w.sum(axis=0))


def test_data_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_median_subgradient_ties_and_even_counts():
    x = Tensor([[1.0], [2.0], [2.0], [9.0], [0.0]], requires_grad=True)
    g = ad.backward(ad.sum(ad.median(x)), [x])[x]
    np.testing.assert_allclose(g.ravel(), [0, 0.5, 0.5, 0, 0])
    y = Tensor([[4.0], [1.0], [3.0], [2.0]], requires_grad=True)
    m = ad.median(y)
    assert m.item() == 2.5
    np.testing.assert_allclose(ad.backward(ad.sum(m), [y])[y].ravel(), [0, 0, 0.5, 0.5])


def test_grad_check_linear_and_constant():
    x = np.linspace(-1, 1, 5)
    assert ad.grad_check(lambda t: ad.sum(t * 3.0) + 1.0, x) < 1e-8
    assert ad.grad_check(lambda t: ad.sum(t * 0.0), x) == 0.0


def test_grad_check_cross_entropy_mlp(rng):
    w1, w2 = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    labels = np.eye(3)[[0, 2, 1]]

    def ce(x):
        p = ad.softmax(ad.relu(x @ w1) @ w2)
        return -ad.sum(ad.log(p) * labels) / 3

    assert ad.grad_check(ce, rng.uniform(-1, 1, size=(3, 4)), h=1e-5) < 1e-4


def _rel_err(f, x):
    leaf = Tensor(x, requires_grad=True)
    analytic = ad.backward(f(leaf), [leaf])[leaf]
    numeric = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        p, m = x.copy(), x.copy()
        p[i] += 1e-6
        m[i] -= 1e-6
        numeric[i] = (f(Tensor(p)).item() - f(Tensor(m)).item()) / 2e-6
    return np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))


def away_from(values, points, gap=1e-3):
    return all(np.all(np.abs(values - p) > gap) for p in points)


mats = arrays(np.float64, (3, 4), elements=finite)

UNARY = {
    "relu": (ad.relu, lambda x: away_from(x, [0.0])),
    "exp": (ad.exp, lambda x: True),
    "log": (lambda t: ad.log(t * t + 0.5), lambda x: True),
    "sqrt": (lambda t: ad.sqrt(t * t + 0.5), lambda x: True),
    "neg": (ad.neg, lambda x: True),
    "clamp": (lambda t: ad.clamp(t, -1.0, 1.0), lambda x: away_from(x, [-1.0, 1.0])),
    "softmax": (ad.softmax, lambda x: True),
    "mean": (lambda t: ad.mean(t, axis=0, keepdims=True), lambda x: True),
    "var": (ad.var, lambda x: True),
    "median": (ad.median, lambda x: all(np.min(np.diff(np.sort(c))) > 1e-3 for c in x.T)),
    "take_rows": (lambda t: ad.take_rows(t, [2, 0, 2]), lambda x: True),
    "slice_rows": (lambda t: ad.slice_rows(t, 1, 3), lambda x: True),
    "concat_rows": (lambda t: ad.concat_rows([t, t * 2.0]), lambda x: True),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=100)
@given(x=mats)
def test_unary_primitives_match_finite_differences(name, x):
    f, ok = UNARY[name]
    if not ok(x):
        return
    assert _rel_err(lambda t: weighted(f(t)), x) < 1e-4


BINARY = {
    "add": lambda t, y: t + y,
    "sub": lambda t, y: t - y,
    "mul": lambda t, y: t * y,
    "div": lambda t, y: t / (y * y + 0.5),
    "matmul": lambda t, y: t @ y.data.T if isinstance(y, Tensor) else t @ y.T,
    "row_bias": lambda t, y: t + y[0],
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=100)
@given(x=mats, y=mats)
def test_binary_primitives_match_finite_differences(name, x, y):
    op = BINARY[name]
    assert _rel_err(lambda t: weighted(op(t, y)), x) < 1e-4
    if name not in ("matmul", "row_bias"):
        assert _rel_err(lambda t: weighted(op(Tensor(x), t)), y) < 1e-4


@given(x=mats)
def test_forward_values_finite(x):
    out = ad.softmax(ad.exp(x) @ np.ones((4, 2)))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_batch_coupling_and_running_block():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    # batch-normalized row 0 depends on every row
    z = (x - ad.mean(x, axis=0, keepdims=True)) / ad.sqrt(ad.var(x) + 1e-5)
    g = ad.backward(ad.sum(ad.take_rows(z, [0]) * np.arange(1.0, 4.0)), [x])[x]
    assert np.all(np.abs(g[1:]) > 0)
    # fixed statistics: no cross-row flow at all
    z_fixed = (x - np.ones((1, 3))) / 2.0
    g_fixed = ad.backward(ad.sum(ad.take_rows(z_fixed, [0]) * np.arange(1.0, 4.0)), [x])[x]
    assert np.all(g_fixed[1:] == 0.0)
