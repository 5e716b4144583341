"""Combining the attack gradient ``a`` with the stealth gradient ``c``.

The main entry point is :func:`solve_direction`, a max-min trust-region
step centred at ``a`` under the metric ``M = I + lam * u u^T``. The metric
is never formed; ``M^{-1}`` acts through the rank-one identity
``M^{-1} g = g - lam/(1+lam) * u (u^T g)``.

Baselines used for ablations live in :func:`baseline_combine`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

EPS_NUM = 1e-12
W_TOL = 1e-6
MAX_ITER = 200


@dataclass(frozen=True)
class MetricSpec:
    u: np.ndarray
    lam: float
    kappa: float
    s: float
    eps: float = EPS_NUM


@dataclass(frozen=True)
class AlignSolution:
    d: np.ndarray
    w_star: float
    lam: float
    u: np.ndarray
    s: float
    rho: float
    xi: float
    objective: float
    fallback: bool
    # unit-M-norm trust-region step; d = a + rho * p
    p: np.ndarray | None = None


def cosine(a, c, eps: float = EPS_NUM) -> float:
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    a_hat = a / (np.linalg.norm(a) + eps)
    c_hat = c / (np.linalg.norm(c) + eps)
    return float(np.clip(a_hat @ c_hat, -1.0, 1.0))


def build_metric(a, c, kappa: float, eps: float = EPS_NUM) -> MetricSpec:
    """Deviation axis from a-hat toward c-hat and anisotropy ``kappa * (1 - s)``."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    a_hat = a / (np.linalg.norm(a) + eps)
    c_hat = c / (np.linalg.norm(c) + eps)
    s = float(np.clip(a_hat @ c_hat, -1.0, 1.0))
    diff = c_hat - a_hat
    n = np.linalg.norm(diff)
    # with u = 0 the metric is the identity whatever lam is
    u = diff / n if n > eps else np.zeros_like(a)
    return MetricSpec(u=u, lam=kappa * (1.0 - s), kappa=kappa, s=s, eps=eps)


def minv_apply(metric: MetricSpec, g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    lam, u = metric.lam, metric.u
    return g - (lam / (1.0 + lam)) * u * (u @ g)


def m_apply(metric: MetricSpec, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v + metric.lam * metric.u * (metric.u @ v)


def m_norm(metric: MetricSpec, v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(max(v @ m_apply(metric, v), 0.0)))


def minv_norm(metric: MetricSpec, g) -> float:
    g = np.asarray(g, dtype=np.float64)
    return float(np.sqrt(max(g @ minv_apply(metric, g), 0.0)))


def minimize_unit_interval(f, tol: float = W_TOL, maxiter: int = MAX_ITER) -> tuple[float, float]:
    """Bounded Brent search on [0, 1], with both endpoints as candidates.

    The bounded search never evaluates the endpoints themselves, and for
    convex objectives they are where the minimum often sits.
    """
    res = minimize_scalar(f, bounds=(0.0, 1.0), method="bounded", options={"xatol": tol, "maxiter": maxiter})
    best_w, best_f = float(res.x), float(res.fun)
    for w in (0.0, 1.0):
        fw = float(f(w))
        if fw <= best_f:
            best_w, best_f = w, fw
    return best_w, best_f


def _objective(a, c, metric: MetricSpec, rho: float):
    """phi(w) = a^T g_w + rho * ||g_w||_{M^-1} via precomputed inner products."""
    ma, mc = minv_apply(metric, a), minv_apply(metric, c)
    aa, ac = float(a @ a), float(a @ c)
    qa, qac, qc = float(a @ ma), float(a @ mc), float(c @ mc)

    def phi(w):
        v = 1.0 - w
        q = w * w * qa + 2.0 * w * v * qac + v * v * qc
        return w * aa + v * ac + rho * np.sqrt(max(q, 0.0))

    return phi


def solve_direction(a, c, gamma: float = 0.5, kappa: float = 10.0, eps: float = EPS_NUM, tol: float = W_TOL) -> AlignSolution:
    """Priority-aware aligned direction.

    Solves ``max_d min_{w in [0,1]} g_w^T d`` subject to ``||d - a||_M <= rho``
    with ``g_w = w a + (1-w) c`` and ``rho = gamma ||a||``, through its
    scalar dual ``min_w a^T g_w + rho ||g_w||_{M^-1}``. Falls back to
    ``d = a`` when ``a`` or ``g_{w*}`` is numerically zero.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if a.shape != c.shape or a.ndim != 1:
        raise ValueError(f"gradient pair shapes differ: {a.shape} vs {c.shape}")
    metric = build_metric(a, c, kappa, eps)
    a_norm = float(np.linalg.norm(a))
    rho = gamma * a_norm
    if a_norm <= eps:
        return AlignSolution(a.copy(), 1.0, metric.lam, metric.u, metric.s, rho, float("nan"), 0.0, True)
    phi = _objective(a, c, metric, rho)
    w_star, obj = minimize_unit_interval(phi, tol=tol)
    g = w_star * a + (1.0 - w_star) * c
    mg = minv_apply(metric, g)
    g_norm = float(np.sqrt(max(g @ mg, 0.0)))
    if g_norm <= eps:
        return AlignSolution(a.copy(), w_star, metric.lam, metric.u, metric.s, rho, float("nan"), obj, True)
    p = mg / g_norm
    return AlignSolution(
        d=a + rho * p,
        w_star=w_star,
        lam=metric.lam,
        u=metric.u,
        s=metric.s,
        rho=rho,
        xi=float(np.linalg.norm(p)),
        objective=obj,
        fallback=False,
        p=p,
    )


def compute_xi(solution: AlignSolution) -> float:
    """Euclidean length of the unit-M-norm trust-region step."""
    if solution.fallback:
        raise ValueError("xi is undefined for a fallback solution")
    return float(np.linalg.norm(solution.p))


# -- ablation baselines ------------------------------------------------------

def pcgrad(a, c) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    dot = float(a @ c)
    if dot >= 0:
        return a + c
    a_proj = a - dot / max(float(c @ c), EPS_NUM) * c
    c_proj = c - dot / max(float(a @ a), EPS_NUM) * a
    return a_proj + c_proj


def cagrad(a, c, alpha: float = 0.5, tol: float = W_TOL) -> np.ndarray:
    """Two-task conflict-averse direction ``g0 + r * g_w / ||g_w||``.

    ``g0`` is the mean gradient, ``r = alpha * ||g0||`` and ``w`` minimizes
    ``g_w^T g0 + r ||g_w||`` over [0, 1] (no final 1/(1+alpha^2) rescale).
    """
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    g0 = 0.5 * (a + c)
    r = alpha * float(np.linalg.norm(g0))
    aa, ac, cc = float(a @ a), float(a @ c), float(c @ c)
    a0, c0 = float(a @ g0), float(c @ g0)

    def f(w):
        v = 1.0 - w
        return w * a0 + v * c0 + r * np.sqrt(max(w * w * aa + 2 * w * v * ac + v * v * cc, 0.0))

    w, _ = minimize_unit_interval(f, tol=tol)
    g = w * a + (1.0 - w) * c
    n = float(np.linalg.norm(g))
    return g0 + r * g / n if n > EPS_NUM else g0


def baseline_combine(a, c, method: str, gamma: float = 0.5, alpha: float = 0.5, eps: float = EPS_NUM) -> np.ndarray:
    if method == "sum":
        return np.asarray(a, dtype=np.float64) + np.asarray(c, dtype=np.float64)
    if method == "pcgrad":
        return pcgrad(a, c)
    if method == "cagrad":
        return cagrad(a, c, alpha)
    if method == "euclid-tr":
        return solve_direction(a, c, gamma=gamma, kappa=0.0, eps=eps).d
    raise ValueError(f"unknown combination method {method!r}")


# -- descent guarantee check -------------------------------------------------

@dataclass(frozen=True)
class DescentReport:
    decrease: float
    bound: float
    eta: float
    xi: float
    lipschitz: float
    violation: bool


def check_descent(hessian, delta0, delta, c, gamma: float = 0.5, kappa: float = 10.0, tol: float = 1e-9) -> DescentReport:
    """One aligned step on ``0.5 (x - delta0)^T H (x - delta0)`` against its guaranteed decrease.

    Step size ``eta = (1 - gamma xi) / (L (1 + gamma xi)^2)`` with
    ``L = lambda_max(H)``; the guaranteed decrease is
    ``(1 - gamma xi)^2 / (2 L (1 + gamma xi)^2) * ||a||^2``.
    """
    H = np.asarray(hessian, dtype=np.float64)
    eig = np.linalg.eigvalsh(0.5 * (H + H.T))
    if eig[0] <= 0:
        raise ValueError("Hessian is not positive definite")
    lip = float(eig[-1])
    delta0 = np.asarray(delta0, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)

    def loss(x):
        r = x - delta0
        return 0.5 * float(r @ H @ r)

    a = H @ (delta - delta0)
    sol = solve_direction(a, c, gamma=gamma, kappa=kappa)
    xi = 1.0 if sol.fallback else sol.xi
    eta = (1 - gamma * xi) / (lip * (1 + gamma * xi) ** 2)
    decrease = loss(delta) - loss(delta - eta * sol.d)
    bound = (1 - gamma * xi) ** 2 / (2 * lip * (1 + gamma * xi) ** 2) * float(a @ a)
    return DescentReport(decrease, bound, eta, xi, lip, decrease < bound - tol)
