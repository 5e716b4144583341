"""Meta-learned support perturbations for the sample-wise targeted TTA attack.

Each iteration draws one or more simulated adaptation batches ("tasks")
from the attacker's own pool, split into triggered victims, perturbed
support rows and untouched benign rows. The attack gradient ``a`` comes
from cross-entropy of the victims against the target label; the stealth
gradient ``c`` from the KL drift of benign predictions between the clean
and the perturbed batch. Both reach the perturbations only through the
shared BatchNorm statistics.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import align
from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .nn import ModelState
from .trigger import TriggerSpec, apply_trigger

MODES = ("ours", "cls-only", "cls-plus-stl", "pcgrad", "cagrad", "euclid-tr")
ARTIFACT_FORMAT = "ttattack.artifact"
ARTIFACT_VERSION = 1
CURVE_COLUMNS = ("iteration", "l_cls", "l_stl", "cosine", "w_star", "lam", "xi", "a_norm", "c_norm", "d_norm", "delta_linf")


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 500
    tasks_per_iter: int = 1
    step_size: float = 0.008
    epsilon: float = 16 / 255
    gamma: float = 0.5
    kappa: float = 10.0
    eps_num: float = align.EPS_NUM
    target: int = 0
    victim_ratio: tuple[float, float] = (0.05, 0.20)
    support_ratio: tuple[float, float] = (0.40, 0.60)
    mode: str = "ours"
    aug_sigma: float = 0.0
    cagrad_alpha: float = 0.5
    # rows drawn from the pool per task; None uses the whole pool
    task_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown objective mode {self.mode!r}")
        if self.iterations < 0 or self.tasks_per_iter < 1 or not self.step_size > 0 or self.epsilon < 0:
            raise ValueError("need iterations >= 0, tasks_per_iter >= 1, step_size > 0, epsilon >= 0")
        for lo, hi in (self.victim_ratio, self.support_ratio):
            if not 0 < lo <= hi < 1:
                raise ValueError("ratio ranges must satisfy 0 < lo <= hi < 1")
        if self.victim_ratio[1] + self.support_ratio[1] >= 1:
            raise ValueError("victim-hi + support-hi must stay below 1")
        if self.aug_sigma < 0:
            raise ValueError("aug_sigma must be non-negative")
        object.__setattr__(self, "victim_ratio", tuple(self.victim_ratio))
        object.__setattr__(self, "support_ratio", tuple(self.support_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["victim_ratio"] = list(self.victim_ratio)
        d["support_ratio"] = list(self.support_ratio)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class Task:
    victim: np.ndarray
    support: np.ndarray
    benign: np.ndarray
    victim_ratio: float
    support_ratio: float


def _count(ratio: float, n: int) -> int:
    return max(1, math.ceil(round(ratio * n, 9)))


def sample_task(n: int, victim_range, support_range, rng: np.random.Generator, task_size: int | None = None) -> Task:
    """Random disjoint victim / support / benign split of ``task_size`` pool indices.

    Counts round up so every role gets at least one row; if victims plus
    support leave no benign row, support shrinks to make room.
    """
    size = n if task_size is None else min(task_size, n)
    if size < 3:
        raise ValueError(f"need at least 3 attacker rows per task, got {size}")
    rv = float(rng.uniform(*victim_range))
    rs = float(rng.uniform(*support_range))
    n_v = _count(rv, size)
    n_s = _count(rs, size)
    if n_v + n_s > size - 1:
        n_v = min(n_v, size - 2)
        n_s = size - 1 - n_v
    perm = rng.permutation(n)[:size]
    return Task(perm[:n_v], perm[n_v:n_v + n_s], perm[n_v + n_s:], rv, rs)


def augment_rows(rows, sigma: float, rng: np.random.Generator, clip: float | None = None) -> np.ndarray:
    """Gaussian jitter clipped to ``+-clip`` (default ``2 sigma``), then into [0, 1]."""
    rows = np.asarray(rows, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return rows.copy()
    bound = 2 * sigma if clip is None else clip
    noise = np.clip(rng.normal(0.0, sigma, size=rows.shape), -bound, bound)
    return np.clip(rows + noise, 0.0, 1.0)


def project_linf(delta, epsilon: float, x=None) -> np.ndarray:
    """Clip to the l-inf ball, then keep ``x + delta`` inside [0, 1] when ``x`` is given."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    out = np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)
    if x is not None:
        x = np.asarray(x, dtype=np.float64)
        out = np.clip(out, -x, 1.0 - x)
    return out


@dataclass
class TaskResult:
    a: np.ndarray
    c: np.ndarray
    l_cls: float
    l_stl: float


def task_losses(model: ModelState, pool, delta: Tensor, task: Task, target: int, trigger: TriggerSpec,
                aug_sigma: float = 0.0, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Attack and stealth losses of one task as graph nodes over ``delta``.

    The batch is ``[T(victims), clip(support + delta), benign]``; the stealth
    reference is the same batch without trigger or perturbation, forwarded
    under the model's own BN mode and held constant.
    """
    pool = np.asarray(pool, dtype=np.float64)
    victims, support, benign = pool[task.victim], pool[task.support], pool[task.benign]
    if aug_sigma > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        victims = augment_rows(victims, aug_sigma, rng)
        support = augment_rows(support, aug_sigma, rng)
    n_v, n_s = len(victims), len(support)
    benign_rows = np.arange(n_v + n_s, n_v + n_s + len(benign))

    perturbed = ad.clamp(ad.constant(support) + ad.take_rows(delta, task.support), 0.0, 1.0)
    batch = ad.concat_rows([ad.constant(apply_trigger(victims, trigger)), perturbed, ad.constant(benign)])
    out = nn.forward(model, batch)
    ref = nn.forward(model, np.concatenate([victims, support, benign])).probs.data[benign_rows]
    return nn.loss_ce(out, target, rows=np.arange(n_v)), nn.loss_kl(ref, out, rows=benign_rows)


def task_gradients(model: ModelState, pool, delta, task: Task, target: int, trigger: TriggerSpec,
                   aug_sigma: float = 0.0, rng: np.random.Generator | None = None) -> TaskResult:
    """Gradients of the attack and stealth losses w.r.t. the full perturbation set.

    Both gradients have the shape of ``delta`` and vanish outside the support
    rows of ``task``.
    """
    if model.bn_mode != "batch":
        raise ValueError(f"attack needs batch-stats BN coupling, model is in {model.bn_mode!r} mode")
    leaf = Tensor(delta, requires_grad=True)
    l_cls, l_stl = task_losses(model, pool, leaf, task, target, trigger, aug_sigma, rng)
    a = ad.backward(l_cls, [leaf])[leaf]
    c = ad.backward(l_stl, [leaf])[leaf]
    return TaskResult(a, c, l_cls.item(), l_stl.item())


def combine(a: np.ndarray, c: np.ndarray, config: AttackConfig) -> tuple[np.ndarray, align.AlignSolution | None]:
    """Update direction for the configured objective mode."""
    if config.mode == "ours":
        sol = align.solve_direction(a, c, config.gamma, config.kappa, config.eps_num)
        return sol.d, sol
    if config.mode == "euclid-tr":
        sol = align.solve_direction(a, c, config.gamma, 0.0, config.eps_num)
        return sol.d, sol
    if config.mode == "cls-only":
        return a.copy(), None
    if config.mode == "cls-plus-stl":
        return align.baseline_combine(a, c, "sum"), None
    return align.baseline_combine(a, c, config.mode, gamma=config.gamma, alpha=config.cagrad_alpha), None


@dataclass
class AttackArtifact:
    delta: np.ndarray
    config: AttackConfig
    curves: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    # (iteration, a, c) pairs kept in memory only when requested
    snapshots: list = field(default_factory=list, repr=False)

    def perturbed(self, pool) -> np.ndarray:
        return np.clip(np.asarray(pool, dtype=np.float64) + self.delta, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "format": ARTIFACT_FORMAT,
            "version": ARTIFACT_VERSION,
            "delta": {"shape": list(self.delta.shape), "data": [float(v) for v in self.delta.ravel()]},
            "config": self.config.to_dict(),
            "provenance": self.provenance,
            "curves": {k: [float(v) for v in vals] for k, vals in self.curves.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackArtifact":
        if d.get("format") != ARTIFACT_FORMAT or d.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"not a v{ARTIFACT_VERSION} attack artifact")
        delta = np.array(d["delta"]["data"], dtype=np.float64).reshape(d["delta"]["shape"])
        return cls(delta, AttackConfig.from_dict(d["config"]), d.get("curves", {}), d.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "AttackArtifact":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def curves_csv(self) -> str:
        cols = [c for c in CURVE_COLUMNS if c in self.curves]
        lines = [",".join(cols)]
        for i in range(len(self.curves.get("iteration", []))):
            lines.append(",".join(str(int(self.curves[c][i])) if c == "iteration" else repr(float(self.curves[c][i]))
                                  for c in cols))
        return "\n".join(lines) + "\n"


def run_attack(model: ModelState, pool, config: AttackConfig, trigger: TriggerSpec,
               rng: np.random.Generator | None = None, snapshot_every: int = 0) -> AttackArtifact:
    """Projected meta-gradient descent on one perturbation per pool row."""
    pool = np.asarray(pool, dtype=np.float64)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    delta = np.zeros_like(pool)
    curves = {k: [] for k in CURVE_COLUMNS}
    snapshots = []
    nan = float("nan")
    for k in range(config.iterations):
        a = np.zeros(delta.size)
        c = np.zeros(delta.size)
        l_cls = l_stl = 0.0
        for _ in range(config.tasks_per_iter):
            task = sample_task(len(pool), config.victim_ratio, config.support_ratio, rng, config.task_size)
            res = task_gradients(model, pool, delta, task, config.target, trigger, config.aug_sigma, rng)
            a += res.a.ravel()
            c += res.c.ravel()
            l_cls += res.l_cls
            l_stl += res.l_stl
        t = config.tasks_per_iter
        a /= t
        c /= t
        d, sol = combine(a, c, config)
        delta = project_linf(delta - config.step_size * d.reshape(delta.shape), config.epsilon, pool)

        curves["iteration"].append(k)
        curves["l_cls"].append(l_cls / t)
        curves["l_stl"].append(l_stl / t)
        curves["cosine"].append(align.cosine(a, c, config.eps_num))
        curves["w_star"].append(sol.w_star if sol else nan)
        curves["lam"].append(sol.lam if sol else nan)
        curves["xi"].append(sol.xi if sol else nan)
        curves["a_norm"].append(float(np.linalg.norm(a)))
        curves["c_norm"].append(float(np.linalg.norm(c)))
        curves["d_norm"].append(float(np.linalg.norm(d)))
        curves["delta_linf"].append(float(np.abs(delta).max(initial=0.0)))
        if snapshot_every and k % snapshot_every == 0:
            snapshots.append((k, a.copy(), c.copy()))
    return AttackArtifact(delta, config, curves, snapshots=snapshots)


def negative_cosine_fraction(artifact: AttackArtifact) -> float:
    s = np.asarray(artifact.curves.get("cosine", []), dtype=np.float64)
    return float(np.mean(s < 0)) if s.size else float("nan")
