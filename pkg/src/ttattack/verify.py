"""Self-check suites: gradients, the direction solver, the descent bound and exact reductions.

Each suite returns a :class:`SuiteResult`; the numbers of random instances
are arguments so tests can run reduced versions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import align, nn
from .attack import AttackConfig, Task, run_attack, task_losses
from .autodiff import Tensor, backward
from .trigger import TriggerSpec
from .tta import TtaConfig, TtaServer

SUITES = ("gradcheck", "solver-oracle", "descent-theorem", "reduction-checks")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)

    def line(self) -> str:
        shown = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.metrics.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {shown}"


# -- gradients ---------------------------------------------------------------

def _mixed_task(n: int) -> Task:
    n_v = max(1, n // 6)
    n_s = n // 2 - n_v + 1
    idx = np.arange(n)
    return Task(idx[:n_v], idx[n_v:n_v + n_s], idx[n_v + n_s:], n_v / n, n_s / n)


def finite_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        out.reshape(-1)[i] = (f(plus.reshape(x.shape)) - f(minus.reshape(x.shape))) / (2 * h)
    return out


def gradcheck(sizes=(6, 12), dim: int = 8, n_classes: int = 3, seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    """Analytic perturbation gradients of both losses against central differences.

    The error is the largest coordinate gap relative to the largest analytic
    coordinate. Also checks that with running statistics the attack loss has
    an exactly zero gradient on every support perturbation.
    """
    rng = np.random.default_rng(seed)
    model = nn.init_model(dim, n_classes, rng=rng)
    trigger = TriggerSpec.for_dim("patch", dim)
    worst = 0.0
    coupling_zero = True
    for n in sizes:
        task = _mixed_task(n)
        pool = rng.uniform(0.2, 0.8, size=(n, dim))
        delta = rng.uniform(-0.05, 0.05, size=(n, dim))
        for which in (0, 1):
            def f(d, which=which):
                return task_losses(model, pool, Tensor(d), task, 0, trigger)[which].item()

            leaf = Tensor(delta, requires_grad=True)
            loss = task_losses(model, pool, leaf, task, 0, trigger)[which]
            analytic = backward(loss, [leaf])[leaf]
            numeric = finite_difference(f, delta)
            scale = max(float(np.abs(analytic).max()), 1e-12)
            worst = max(worst, float(np.abs(analytic - numeric).max()) / scale)
        leaf = Tensor(delta, requires_grad=True)
        l_cls, _ = task_losses(model.with_mode("running"), pool, leaf, task, 0, trigger)
        coupling_zero &= bool(np.all(backward(l_cls, [leaf])[leaf][task.support] == 0.0))
    return SuiteResult("gradcheck", worst < tol and coupling_zero,
                       {"max_rel_err": worst, "running_mode_support_grad_zero": coupling_zero})


# -- solver ------------------------------------------------------------------

def random_instance(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float, float]:
    """A random (a, c, gamma, kappa), with a share of degenerate geometries."""
    n = int(rng.integers(2, 51))
    a = rng.normal(size=n) * rng.choice([1e-2, 1.0, 1e2])
    kind = rng.integers(6)
    if kind == 0:
        c = -a * rng.uniform(0.1, 10)
    elif kind == 1:
        c = a * rng.uniform(0.1, 10)
    elif kind == 2:
        c = -a + 1e-6 * rng.normal(size=n)
    else:
        c = rng.normal(size=n) * rng.choice([1e-2, 1.0, 1e2])
    gamma = float(rng.uniform(0.01, 0.99))
    kappa = float(rng.choice([0.0, rng.uniform(0, 50)]))
    return a, c, gamma, kappa


def _dense_metric(a, c, kappa, eps=align.EPS_NUM):
    a_hat = a / (np.linalg.norm(a) + eps)
    c_hat = c / (np.linalg.norm(c) + eps)
    s = float(np.clip(a_hat @ c_hat, -1, 1))
    diff = c_hat - a_hat
    nd = np.linalg.norm(diff)
    u = diff / nd if nd > eps else np.zeros_like(a)
    lam = kappa * (1 - s)
    return np.eye(len(a)) + lam * np.outer(u, u), lam


def grid_gap(a, c, gamma, kappa, sol: align.AlignSolution, resolution: float = 1e-4) -> float:
    """phi(w*) minus the minimum of phi over a uniform w-grid, using a dense inverse."""
    M, _ = _dense_metric(a, c, kappa)
    Mi = np.linalg.inv(M)
    rho = gamma * np.linalg.norm(a)
    qa, qac, qc = a @ Mi @ a, a @ Mi @ c, c @ Mi @ c
    aa, ac = a @ a, a @ c

    def phi(w):
        w = np.asarray(w, dtype=np.float64)
        v = 1 - w
        q = np.maximum(w * w * qa + 2 * w * v * qac + v * v * qc, 0.0)
        return w * aa + v * ac + rho * np.sqrt(q)

    grid = np.linspace(0.0, 1.0, int(round(1 / resolution)) + 1)
    return float(phi(sol.w_star) - phi(grid).min())


def solver_oracle(n_instances: int = 1000, seed: int = 0, gap_tol: float = 1e-8, radius_tol: float = 1e-6,
                  worked_tol: float = 1e-9) -> SuiteResult:
    """Solver against a dense-inverse grid oracle, plus the radius, xi and antiparallel checks."""
    rng = np.random.default_rng(seed)
    worst_gap = worst_radius = 0.0
    xi_ok = True
    for _ in range(n_instances):
        a, c, gamma, kappa = random_instance(rng)
        sol = align.solve_direction(a, c, gamma, kappa)
        worst_gap = max(worst_gap, grid_gap(a, c, gamma, kappa, sol))
        if not sol.fallback:
            M, lam = _dense_metric(a, c, kappa)
            r = sol.d - a
            worst_radius = max(worst_radius, abs(math.sqrt(r @ M @ r) - sol.rho))
            xi_ok &= 1 / math.sqrt(1 + lam) - 1e-12 <= sol.xi <= 1 + 1e-12
    worst_worked = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 51))
        a = rng.normal(size=n)
        gamma, kappa = float(rng.uniform(0.01, 0.99)), float(rng.uniform(0, 50))
        sol = align.solve_direction(a, -a, gamma, kappa)
        expected = a * (1 - gamma / math.sqrt(1 + 2 * kappa))
        worst_worked = max(worst_worked, float(np.abs(sol.d - expected).max()))
    passed = worst_gap <= gap_tol and worst_radius <= radius_tol and xi_ok and worst_worked <= worked_tol
    return SuiteResult("solver-oracle", passed, {
        "instances": n_instances, "max_gap": worst_gap, "max_radius_err": worst_radius,
        "xi_in_bounds": xi_ok, "antiparallel_err": worst_worked})


# -- descent bound -----------------------------------------------------------

def descent_bound(n_instances: int = 500, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    """One step at the prescribed step size on random PD quadratics never undershoots the bound."""
    rng = np.random.default_rng(seed)
    violations = 0
    worst_slack = math.inf
    for _ in range(n_instances):
        n = int(rng.integers(2, 31))
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        H = (q * rng.uniform(0.1, 10.0, size=n)) @ q.T
        H = 0.5 * (H + H.T)
        delta0, delta = rng.normal(size=n), rng.normal(size=n)
        a = H @ (delta - delta0)
        c = -a * rng.uniform(0.1, 3) + rng.normal(size=n) * rng.uniform(0, 2)
        rep = align.check_descent(H, delta0, delta, c, float(rng.uniform(0.01, 0.99)), float(rng.uniform(0, 50)), tol)
        violations += rep.violation
        worst_slack = min(worst_slack, rep.decrease - rep.bound)
    return SuiteResult("descent-theorem", violations == 0,
                       {"instances": n_instances, "violations": violations, "min_slack": worst_slack})


# -- exact reductions ---------------------------------------------------------

def _small_setup(seed: int):
    rng = np.random.default_rng(seed)
    dim, n_classes = 8, 3
    model = nn.init_model(dim, n_classes, rng=rng)
    pool = rng.uniform(0.1, 0.9, size=(20, dim))
    batches = [rng.uniform(0.1, 0.9, size=(16, dim)) for _ in range(4)]
    return model, pool, batches, TriggerSpec.for_dim("patch", dim)


def _serve_trace(model, batches, config: TtaConfig):
    server = TtaServer(model, config)
    outs = [server.step(b).probs.data for b in batches]
    return outs, server.served_model


def _same_trace(t1, t2) -> bool:
    (o1, m1), (o2, m2) = t1, t2
    return all(np.array_equal(x, y) for x, y in zip(o1, o2)) and all(
        np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)


def reduction_checks(seed: int = 0, iterations: int = 20) -> SuiteResult:
    """Bitwise reductions between modes that must coincide."""
    model, pool, batches, trigger = _small_setup(seed)
    base = dict(iterations=iterations, seed=seed, victim_ratio=(0.1, 0.2), support_ratio=(0.4, 0.5))
    ours0 = run_attack(model, pool, AttackConfig(mode="ours", kappa=0.0, **base), trigger)
    eucl = run_attack(model, pool, AttackConfig(mode="euclid-tr", kappa=10.0, **base), trigger)
    kappa_zero = bool(np.array_equal(ours0.delta, eucl.delta))

    tent = _serve_trace(model, batches, TtaConfig(method="tent", lr=0.5))
    filt = _serve_trace(model, batches, TtaConfig(method="entropy-filtered", lr=0.5, entropy_threshold=math.inf))
    filter_inf = _same_trace(tent, filt)

    ema0 = _serve_trace(model, batches, TtaConfig(lr=0.5, defense="ema", ema_alpha=0.0))
    ema_zero = _same_trace(tent, ema0)

    rng = np.random.default_rng(seed + 1)
    centre = rng.uniform(0.3, 0.7, size=(1, 8))
    spread = rng.uniform(-0.2, 0.2, size=(10, 8))
    symmetric = np.concatenate([centre + spread, centre - spread, centre])
    one_bn = nn.init_model(8, 3, hidden=(32,), rng=rng)
    mean_out = nn.forward(one_bn, symmetric, mode="batch").logits.data
    med_out = nn.forward(one_bn, symmetric, mode="median").logits.data
    medbn_gap = float(np.abs(mean_out - med_out).max())
    two_bn_first = [nn.forward(model, symmetric, mode=m).bn_stats[0] for m in ("batch", "median")]
    medbn_gap = max(medbn_gap, *(float(np.abs(x.data - y.data).max()) for x, y in zip(*two_bn_first)))

    passed = kappa_zero and filter_inf and ema_zero and medbn_gap < 1e-10
    return SuiteResult("reduction-checks", passed, {
        "kappa0_equals_euclid": kappa_zero, "filter_inf_equals_tent": filter_inf,
        "ema0_equals_plain": ema_zero, "medbn_vs_mean_gap": medbn_gap})


def run_suite(name: str, quick: bool = False) -> SuiteResult:
    if name == "gradcheck":
        return gradcheck()
    if name == "solver-oracle":
        return solver_oracle(200 if quick else 1000)
    if name == "descent-theorem":
        return descent_bound(100 if quick else 500)
    if name == "reduction-checks":
        return reduction_checks()
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
