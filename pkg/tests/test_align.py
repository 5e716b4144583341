import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttattack import align


def dense_metric(m):
    return np.eye(len(m.u)) + m.lam * np.outer(m.u, m.u)


def random_pair(rng, dim=None):
    dim = dim or int(rng.integers(2, 30))
    a = rng.normal(size=dim) * rng.uniform(0.1, 5)
    c = rng.normal(size=dim) * rng.uniform(0.1, 5)
    if rng.random() < 0.3:
        c = -rng.uniform(0.2, 2) * a + 0.2 * c
    return a, c


seeds = st.integers(0, 2**32 - 1)


def test_cosine_examples():
    assert align.cosine([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)
    assert align.cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert align.cosine([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(-1.0)
    assert align.cosine([0.0, 0.0], [1.0, 0.0]) == 0.0


def test_build_metric_examples():
    m = align.build_metric([1.0, 2.0], [1.0, 2.0], 10)
    # the norm guard leaves s a hair below 1, so lam is about 2 * kappa * eps
    assert m.lam == pytest.approx(0.0, abs=1e-10) and np.all(m.u == 0)
    m = align.build_metric([1.0, 0.0], [0.0, 1.0], 10)
    assert m.lam == pytest.approx(10.0)
    np.testing.assert_allclose(m.u, np.array([-1.0, 1.0]) / math.sqrt(2), atol=1e-12)
    m = align.build_metric([1.0, 0.0], [-1.0, 0.0], 10)
    assert m.lam == pytest.approx(20.0)
    np.testing.assert_allclose(m.u, [-1.0, 0.0], atol=1e-12)


def test_minv_examples():
    m = align.MetricSpec(u=np.array([1.0, 0.0]), lam=3.0, kappa=1.0, s=0.0)
    np.testing.assert_allclose(align.minv_apply(m, [2.0, 1.0]), [0.5, 1.0], atol=1e-15)
    np.testing.assert_allclose(np.linalg.solve(dense_metric(m), [2.0, 1.0]), [0.5, 1.0], atol=1e-15)
    assert np.array_equal(align.minv_apply(m, [0.0, 4.0]), [0.0, 4.0])
    m0 = align.MetricSpec(u=np.array([0.6, 0.8]), lam=0.0, kappa=1.0, s=1.0)
    assert np.array_equal(align.minv_apply(m0, [2.0, -1.0]), [2.0, -1.0])


@given(seed=seeds)
def test_minv_matches_dense_inverse(seed):
    rng = np.random.default_rng(seed)
    a, c = random_pair(rng)
    m = align.build_metric(a, c, rng.uniform(0, 20))
    g = rng.normal(size=a.shape)
    np.testing.assert_allclose(align.minv_apply(m, g), np.linalg.solve(dense_metric(m), g), rtol=1e-9, atol=1e-12)


def test_solve_examples():
    sol = align.solve_direction([1.0, 0.0], [1.0, 0.0], 0.5, 10)
    np.testing.assert_allclose(sol.d, [1.5, 0.0], atol=1e-12)
    assert sol.lam == pytest.approx(0.0, abs=1e-10) and sol.xi == pytest.approx(1.0)

    sol = align.solve_direction([1.0, 0.0], [-1.0, 0.0], 0.5, 10)
    assert sol.w_star == 0.0
    np.testing.assert_allclose(sol.d, [1 - 0.5 / math.sqrt(21), 0.0], atol=1e-12)
    assert sol.d[0] == pytest.approx(0.8909, abs=1e-4)
    assert align.compute_xi(sol) == pytest.approx(1 / math.sqrt(21), abs=1e-12)

    sol = align.solve_direction([0.0, 0.0], [1.0, 0.0])
    assert sol.fallback and np.array_equal(sol.d, [0.0, 0.0])
    with pytest.raises(ValueError):
        align.compute_xi(sol)


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1, 1.5])
def test_gamma_outside_unit_interval_rejected(gamma):
    with pytest.raises(ValueError):
        align.solve_direction([1.0, 0.0], [0.0, 1.0], gamma=gamma)


def phi_dense(a, c, m, rho, w):
    w = np.atleast_1d(w)[:, None]
    g = w * a + (1 - w) * c
    minv = np.linalg.inv(dense_metric(m))
    vals = g @ a + rho * np.sqrt(np.einsum("ij,jk,ik->i", g, minv, g))
    return vals if vals.size > 1 else float(vals[0])


@settings(max_examples=200)
@given(seed=seeds)
def test_solution_matches_grid_oracle_and_lies_on_boundary(seed):
    rng = np.random.default_rng(seed)
    a, c = random_pair(rng)
    gamma, kappa = rng.uniform(0.05, 0.95), rng.uniform(0, 20)
    sol = align.solve_direction(a, c, gamma, kappa)
    assert not sol.fallback
    m = align.build_metric(a, c, kappa)
    rho = gamma * np.linalg.norm(a)
    grid = np.linspace(0, 1, 10_001)
    best = phi_dense(a, c, m, rho, grid).min()
    assert phi_dense(a, c, m, rho, sol.w_star) <= best + 1e-8 * max(1.0, abs(best))
    r = sol.d - a
    assert math.sqrt(r @ dense_metric(m) @ r) == pytest.approx(rho, abs=1e-6 * max(1.0, rho))
    assert 1 / math.sqrt(1 + sol.lam) - 1e-9 <= sol.xi <= 1 + 1e-9


@settings(max_examples=100)
@given(seed=seeds)
def test_phi_is_convex(seed):
    rng = np.random.default_rng(seed)
    a, c = random_pair(rng)
    m = align.build_metric(a, c, rng.uniform(0, 20))
    rho = 0.5 * np.linalg.norm(a)
    w1, w2, t = rng.uniform(size=3)
    lhs = phi_dense(a, c, m, rho, t * w1 + (1 - t) * w2)
    rhs = t * phi_dense(a, c, m, rho, w1) + (1 - t) * phi_dense(a, c, m, rho, w2)
    assert lhs <= rhs + 1e-9 * max(1.0, abs(rhs))


@settings(max_examples=30)
@given(seed=seeds)
def test_worst_case_beats_boundary_samples(seed):
    rng = np.random.default_rng(seed)
    a, c = random_pair(rng)
    gamma, kappa = 0.5, rng.uniform(0, 20)
    sol = align.solve_direction(a, c, gamma, kappa)
    m = align.build_metric(a, c, kappa)
    rho = gamma * np.linalg.norm(a)
    inv_sqrt = np.eye(len(a)) - (1 - 1 / math.sqrt(1 + m.lam)) * np.outer(m.u, m.u)
    z = rng.normal(size=(1000, len(a)))
    boundary = a + rho * (z / np.linalg.norm(z, axis=1, keepdims=True)) @ inv_sqrt
    # g_w^T d is linear in w, so its minimum over [0, 1] sits at an endpoint
    worst = np.minimum(boundary @ a, boundary @ c)
    ours = min(a @ sol.d, c @ sol.d)
    assert ours >= worst.max() - 1e-8 * max(1.0, abs(ours))


@given(seed=seeds, scale=st.floats(0.01, 100))
def test_scale_covariance(seed, scale):
    rng = np.random.default_rng(seed)
    a, c = random_pair(rng)
    s1 = align.solve_direction(a, c)
    s2 = align.solve_direction(scale * a, scale * c)
    assert s2.w_star == pytest.approx(s1.w_star, abs=1e-5)
    np.testing.assert_allclose(s2.d, scale * s1.d, rtol=1e-6, atol=1e-9 * scale * np.abs(s1.d).max())


@settings(max_examples=1000)
@given(seed=seeds)
def test_xi_bounds_hold(seed):
    rng = np.random.default_rng(seed)
    a, c = random_pair(rng)
    sol = align.solve_direction(a, c, rng.uniform(0.05, 0.95), rng.uniform(0, 50))
    assert 1 / math.sqrt(1 + sol.lam) - 1e-9 <= align.compute_xi(sol) <= 1 + 1e-9


@given(seed=seeds)
def test_kappa_zero_is_euclidean_bitwise(seed):
    rng = np.random.default_rng(seed)
    a, c = random_pair(rng)
    assert np.array_equal(align.baseline_combine(a, c, "euclid-tr"), align.solve_direction(a, c, kappa=0.0).d)


def test_pcgrad_examples():
    np.testing.assert_array_equal(align.baseline_combine([1.0, 0.0], [1.0, 1.0], "pcgrad"), [2.0, 1.0])
    np.testing.assert_allclose(align.baseline_combine([1.0, 0.0], [-1.0, 1.0], "pcgrad"), [0.5, 1.5], atol=1e-15)


def test_sum_and_cagrad():
    a, c = np.array([1.0, 0.0]), np.array([-0.5, 1.0])
    np.testing.assert_array_equal(align.baseline_combine(a, c, "sum"), a + c)
    d = align.baseline_combine(a, c, "cagrad")
    # conflict-averse: improves both objectives
    assert d @ a > 0 and d @ c > 0
    np.testing.assert_allclose(align.baseline_combine(a, a, "cagrad"), 1.5 * a, atol=1e-9)
    with pytest.raises(ValueError):
        align.baseline_combine(a, c, "mgda")


def test_descent_examples():
    H = np.diag([2.0, 1.0])
    rep = align.check_descent(H, np.zeros(2), np.zeros(2), np.array([0.3, -1.0]))
    assert rep.bound == 0.0 and rep.decrease == 0.0 and not rep.violation
    rep = align.check_descent(H, np.zeros(2), np.array([1.0, 1.0]), H @ np.array([1.0, 1.0]), gamma=0.5)
    assert rep.xi == pytest.approx(1.0)
    assert rep.eta == pytest.approx((1 - 0.5) / (2.0 * 1.5 ** 2))
    with pytest.raises(ValueError):
        align.check_descent(np.diag([1.0, -1.0]), np.zeros(2), np.ones(2), np.ones(2))


@settings(max_examples=500)
@given(seed=seeds)
def test_descent_bound_never_violated(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 21))
    q = rng.normal(size=(dim, dim))
    H = q @ q.T + rng.uniform(0.01, 1) * np.eye(dim)
    rep = align.check_descent(H, rng.normal(size=dim), rng.normal(size=dim), rng.normal(size=dim) * 3,
                              gamma=rng.uniform(0.05, 0.95), kappa=rng.uniform(0, 20))
    assert not rep.violation
    assert rep.decrease >= rep.bound - 1e-9
