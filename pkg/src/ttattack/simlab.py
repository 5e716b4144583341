"""Synthetic deployment lab: shifted-blob data, mixed test streams, served metrics."""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn import ModelState
from .trigger import TriggerSpec, apply_trigger
from .tta import TtaConfig, TtaServer

ROLES = ("benign", "victim-triggered", "victim-clean", "attacker")
HIST_SMOOTHING = 1e-8


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def make_blobs(n_classes: int, dim: int, n_per_class: int, separation: float = 6.0, severity: int = 0,
               seed: int = 0, shift_per_level: float = 0.5, noise_per_level: float = 0.3,
               temperature: float = 8.0, background=()) -> tuple[Dataset, Dataset]:
    """Gaussian clusters and a corrupted copy of the same draw.

    Class means sit on scaled orthonormal directions with pairwise distance
    ``separation`` (unit within-class sigma). The shifted copy adds a global
    mean shift of ``severity * shift_per_level`` sigma along a fixed random
    direction and extra noise of ``severity * noise_per_level`` sigma. Both
    are squashed into [0, 1] with a logistic of slope ``1/temperature``.

    ``background`` lists input dimensions that carry no class signal (noise
    and shift only), like the border of a centred image.
    """
    if n_classes < 2 or dim < 4:
        raise ValueError("need at least 2 classes and 4 input dimensions")
    if severity < 0:
        raise ValueError("severity must be non-negative")
    signal = np.setdiff1d(np.arange(dim), np.asarray(background, dtype=int))
    if len(signal) < n_classes:
        raise ValueError("too few signal dimensions left for the class means")
    rng = np.random.default_rng(seed)
    basis = np.zeros((dim, n_classes))
    basis[signal], _ = np.linalg.qr(rng.normal(size=(len(signal), n_classes)))
    means = basis.T * (separation / math.sqrt(2.0))
    y = np.repeat(np.arange(n_classes), n_per_class)
    z = rng.normal(size=(len(y), dim))
    extra = rng.normal(size=(len(y), dim))
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    order = rng.permutation(len(y))
    y, z, extra = y[order], z[order], extra[order]
    raw = means[y] + z
    shifted_raw = raw + severity * shift_per_level * direction + severity * noise_per_level * extra

    def squash(v):
        return 1.0 / (1.0 + np.exp(-v / temperature))

    clean = Dataset(squash(raw), y.copy())
    shifted = Dataset(clean.x.copy() if severity == 0 else squash(shifted_raw), y.copy())
    return clean, shifted


@dataclass(frozen=True)
class StreamConfig:
    batch_size: int = 200
    # fraction of each batch filled by attacker rows (0.5 is a 1:1 mix)
    attacker_ratio: float = 0.5
    # fraction of user rows that belong to victims
    victim_frac: float = 0.09
    # fraction of victim rows that actually carry the trigger
    victim_trigger_frac: float = 1.0
    n_batches: int = 10
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 4:
            raise ValueError("batch_size must be at least 4")
        for name in ("attacker_ratio", "victim_frac"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0 <= self.victim_trigger_frac <= 1:
            raise ValueError("victim_trigger_frac must lie in [0, 1]")
        if self.n_batches < 1:
            raise ValueError("n_batches must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StreamBatch:
    rows: np.ndarray
    # the same rows with attacker perturbations and triggers removed
    clean_rows: np.ndarray
    roles: np.ndarray
    labels: np.ndarray
    t: int

    def role_counts(self) -> dict:
        return {r: int(np.sum(self.roles == r)) for r in ROLES}


class _UserSampler:
    """Draws user rows without replacement; victims round-robin over non-target classes."""

    def __init__(self, labels: np.ndarray, target: int, rng: np.random.Generator):
        self.order = rng.permutation(len(labels))
        self.labels = labels
        self.classes = [k for k in np.unique(labels) if k != target]
        self.queues = {k: [i for i in self.order if labels[i] == k] for k in self.classes}
        self.used: set[int] = set()
        self.cursor = 0
        self.turn = 0

    def victims(self, n: int) -> list[int]:
        out = []
        for _ in range(n):
            for _ in range(len(self.classes)):
                q = self.queues[self.classes[self.turn % len(self.classes)]]
                self.turn += 1
                while q and q[0] in self.used:
                    q.pop(0)
                if q:
                    out.append(int(q.pop(0)))
                    self.used.add(out[-1])
                    break
            else:
                raise ValueError("not enough non-target user rows for victims")
        return out

    def others(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if self.cursor >= len(self.order):
                raise ValueError("not enough user rows for the stream")
            i = int(self.order[self.cursor])
            self.cursor += 1
            if i not in self.used:
                self.used.add(i)
                out.append(i)
        return out


def build_stream(user: Dataset, attacker_pool, delta, config: StreamConfig, trigger: TriggerSpec,
                 target: int, rng: np.random.Generator | None = None) -> list[StreamBatch]:
    """Deterministic sequence of mixed test batches.

    ``delta`` is the attacker perturbation set (one row per pool row) or
    ``None`` for unperturbed attacker rows. Attacker rows cycle through the
    pool in order; user rows are consumed without replacement.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    pool = np.asarray(attacker_pool, dtype=np.float64) if attacker_pool is not None else np.zeros((0, user.x.shape[1]))
    n_att = int(round(config.attacker_ratio * config.batch_size))
    n_user = config.batch_size - n_att
    n_vic = int(round(config.victim_frac * n_user))
    n_trig = int(round(config.victim_trigger_frac * n_vic))
    if n_att and len(pool) < n_att:
        raise ValueError(f"attacker pool has {len(pool)} rows, batch needs {n_att}")
    if n_user * config.n_batches > len(user):
        raise ValueError(f"stream needs {n_user * config.n_batches} user rows, dataset has {len(user)}")
    if delta is not None and np.shape(delta) != pool.shape:
        raise ValueError("perturbation set does not match the attacker pool")
    perturbed = np.clip(pool + delta, 0.0, 1.0) if delta is not None else pool
    sampler = _UserSampler(user.y, target, rng)
    batches = []
    for t in range(config.n_batches):
        victims = sampler.victims(n_vic)
        others = sampler.others(n_user - n_vic)
        att_idx = (t * n_att + np.arange(n_att)) % max(len(pool), 1)

        vic_x = user.x[victims] if victims else np.zeros((0, user.x.shape[1]))
        vic_rows = vic_x.copy()
        if n_trig:
            vic_rows[:n_trig] = apply_trigger(vic_x[:n_trig], trigger)
        rows = np.concatenate([user.x[others], vic_rows, perturbed[att_idx]])
        clean = np.concatenate([user.x[others], vic_x, pool[att_idx]])
        roles = np.array(["benign"] * len(others) + ["victim-triggered"] * n_trig
                         + ["victim-clean"] * (n_vic - n_trig) + ["attacker"] * n_att)
        labels = np.concatenate([user.y[others], user.y[victims].astype(int) if victims else np.zeros(0, int),
                                 np.full(n_att, -1)])
        order = rng.permutation(len(rows))
        batches.append(StreamBatch(rows[order], clean[order], roles[order], labels[order].astype(int), t))
    return batches


# -- metrics -----------------------------------------------------------------

def label_kl(p_ref_counts, p_counts, smoothing: float = HIST_SMOOTHING) -> float:
    """KL(ref || observed) between smoothed label histograms."""
    ref = np.asarray(p_ref_counts, dtype=np.float64) + smoothing
    obs = np.asarray(p_counts, dtype=np.float64) + smoothing
    ref /= ref.sum()
    obs /= obs.sum()
    return float(max(np.sum(ref * (np.log(ref) - np.log(obs))), 0.0))


def attack_success_rate(predictions, target: int) -> float | None:
    predictions = np.asarray(predictions)
    if predictions.size == 0:
        return None
    return float(np.mean(predictions == target))


def _summary(values) -> dict:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"defined": False, "count": 0}
    q10, q50, q90 = np.quantile(values, [0.1, 0.5, 0.9])
    return {"defined": True, "count": int(values.size), "mean": float(values.mean()),
            "q10": float(q10), "median": float(q50), "q90": float(q90)}


def entropy_report(stream: list[StreamBatch], model: ModelState) -> dict:
    """Per-role prediction entropy of ``model`` over every batch of the stream."""
    per_role: dict[str, list] = {r: [] for r in ROLES}
    for b in stream:
        ent = nn.entropy_rows(nn.forward(model, b.rows).probs.data)
        for r in ROLES:
            per_role[r].extend(ent[b.roles == r].tolist())
    return {r: _summary(v) for r, v in per_role.items()}


@dataclass
class MetricsReport:
    asr: float | None
    ba: float
    label_kl: float
    baseline_ba: float
    hist_attack: list
    hist_baseline: list
    per_batch: list = field(default_factory=list)
    entropy: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def asr_defined(self) -> bool:
        return self.asr is not None

    def to_dict(self) -> dict:
        return {
            "asr": self.asr,
            "asr_defined": self.asr_defined,
            "ba": self.ba,
            "label_kl": self.label_kl,
            "baseline_ba": self.baseline_ba,
            "hist_attack": list(self.hist_attack),
            "hist_baseline": list(self.hist_baseline),
            "per_batch": self.per_batch,
            "entropy": self.entropy,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def per_batch_csv(self) -> str:
        cols = ["t", "asr", "ba", "label_kl", "n_triggered", "n_user_clean", "n_attacker"]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for row in self.per_batch:
            buf.write(",".join("" if row[c] is None else repr(row[c]) for c in cols) + "\n")
        return buf.getvalue()

    def histograms_csv(self) -> str:
        lines = ["class,attack,baseline"]
        for k, (h1, h0) in enumerate(zip(self.hist_attack, self.hist_baseline)):
            lines.append(f"{k},{h1},{h0}")
        return "\n".join(lines) + "\n"


def _serve(model: ModelState, rows_seq, tta: TtaConfig) -> list[np.ndarray]:
    server = TtaServer(model, tta)
    return [server.step(rows).predictions for rows in rows_seq]


def run_deployment(model: ModelState, stream: list[StreamBatch], tta: TtaConfig, target: int,
                   entropy_model: ModelState | None = None) -> MetricsReport:
    """Adapt over the stream and score served predictions against a paired no-attack run.

    The baseline replays the identical batches with triggers and attacker
    perturbations stripped. ASR covers triggered victims; BA and the label
    histograms cover benign plus untriggered victim rows. Attacker rows are
    excluded from every served metric.
    """
    n_classes = model.n_classes
    attacked = _serve(model, [b.rows for b in stream], tta)
    baseline = _serve(model, [b.clean_rows for b in stream], tta)
    hist_a = np.zeros(n_classes, dtype=int)
    hist_b = np.zeros(n_classes, dtype=int)
    hits = n_trig = correct = correct_b = n_clean = 0
    per_batch = []
    for b, pa, pb in zip(stream, attacked, baseline):
        trig = b.roles == "victim-triggered"
        user_clean = (b.roles == "benign") | (b.roles == "victim-clean")
        ha = np.bincount(pa[user_clean], minlength=n_classes)
        hb = np.bincount(pb[user_clean], minlength=n_classes)
        hist_a += ha
        hist_b += hb
        hits += int(np.sum(pa[trig] == target))
        n_trig += int(trig.sum())
        correct += int(np.sum(pa[user_clean] == b.labels[user_clean]))
        correct_b += int(np.sum(pb[user_clean] == b.labels[user_clean]))
        n_clean += int(user_clean.sum())
        per_batch.append({
            "t": b.t,
            "asr": attack_success_rate(pa[trig], target),
            "ba": float(np.mean(pa[user_clean] == b.labels[user_clean])) if user_clean.any() else None,
            "label_kl": label_kl(hb, ha),
            "n_triggered": int(trig.sum()),
            "n_user_clean": int(user_clean.sum()),
            "n_attacker": int(np.sum(b.roles == "attacker")),
        })
    return MetricsReport(
        asr=hits / n_trig if n_trig else None,
        ba=correct / n_clean if n_clean else float("nan"),
        label_kl=label_kl(hist_b, hist_a),
        baseline_ba=correct_b / n_clean if n_clean else float("nan"),
        hist_attack=hist_a.tolist(),
        hist_baseline=hist_b.tolist(),
        per_batch=per_batch,
        entropy=entropy_report(stream, entropy_model if entropy_model is not None else model),
    )
