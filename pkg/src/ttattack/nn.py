"""BN-MLP classifier, its losses, pretraining and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
PROB_FLOOR = 1e-12
BN_MODES = ("batch", "running", "median")
CHECKPOINT_FORMAT = "ttattack.checkpoint"
CHECKPOINT_VERSION = 1


class PretrainError(RuntimeError):
    def __init__(self, accuracy: float, target: float, epochs: int):
        self.accuracy = accuracy
        super().__init__(f"pretraining did not converge: train accuracy {accuracy:.4f} < {target} after {epochs} epochs")


@dataclass(frozen=True)
class ModelState:
    """Parameters, BN running statistics and the TTA-adaptable subset.

    ``params`` maps names such as ``fc0.weight`` or ``bn1.gamma`` to arrays;
    ``buffers`` holds ``bnK.running_mean`` / ``bnK.running_var``.
    """

    params: Mapping[str, np.ndarray]
    buffers: Mapping[str, np.ndarray]
    n_bn: int
    bn_mode: str = "batch"
    adaptable: tuple[str, ...] = ()
    bn_eps: float = BN_EPS

    def __post_init__(self):
        if self.bn_mode not in BN_MODES:
            raise ValueError(f"unknown bn mode {self.bn_mode!r}")
        for name in self.adaptable:
            if name not in self.params:
                raise KeyError(name)
        for k in range(self.n_bn):
            if np.any(self.buffers[f"bn{k}.running_var"] <= 0):
                raise ValueError("running variance must be positive")

    @property
    def n_linear(self) -> int:
        return self.n_bn + 1

    @property
    def in_dim(self) -> int:
        return self.params["fc0.weight"].shape[0]

    @property
    def n_classes(self) -> int:
        return self.params[f"fc{self.n_bn}.weight"].shape[1]

    def replace(self, **changes) -> "ModelState":
        return dataclasses.replace(self, **changes)

    def with_mode(self, mode: str) -> "ModelState":
        return self.replace(bn_mode=mode)

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "ModelState":
        params = dict(self.params)
        for k, v in updates.items():
            if k not in params:
                raise KeyError(k)
            params[k] = np.asarray(v, dtype=np.float64)
        return self.replace(params=params)


def bn_affine_names(n_bn: int) -> tuple[str, ...]:
    return tuple(n for k in range(n_bn) for n in (f"bn{k}.gamma", f"bn{k}.beta"))


def init_model(in_dim: int, n_classes: int, hidden: tuple[int, ...] = (32, 32), rng: np.random.Generator | None = None) -> ModelState:
    rng = np.random.default_rng(0) if rng is None else rng
    widths = (in_dim, *hidden, n_classes)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"fc{k}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params[f"fc{k}.bias"] = np.zeros(fan_out)
    for k, width in enumerate(hidden):
        params[f"bn{k}.gamma"] = np.ones(width)
        params[f"bn{k}.beta"] = np.zeros(width)
        buffers[f"bn{k}.running_mean"] = np.zeros(width)
        buffers[f"bn{k}.running_var"] = np.ones(width)
    return ModelState(params=params, buffers=buffers, n_bn=len(hidden), adaptable=bn_affine_names(len(hidden)))


@dataclass
class BatchOutput:
    logits: Tensor
    probs: Tensor
    # per-BN-layer (center, spread) actually used, for inspection
    bn_stats: list = field(default_factory=list)

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.data.argmax(axis=1)


def _normalize(h: Tensor, model: ModelState, k: int, mode: str, eps: float):
    if mode == "batch":
        center = ad.mean(h, axis=0, keepdims=True)
        spread = ad.var(h, axis=0, keepdims=True)
    elif mode == "median":
        center = ad.median(h, axis=0, keepdims=True)
        spread = ad.mean((h - center) * (h - center), axis=0, keepdims=True)
    else:
        center = ad.constant(model.buffers[f"bn{k}.running_mean"].reshape(1, -1))
        spread = ad.constant(model.buffers[f"bn{k}.running_var"].reshape(1, -1))
    return (h - center) / ad.sqrt(spread + eps), (center, spread)


def forward(model: ModelState, x, params: Mapping[str, Tensor] | None = None, mode: str | None = None) -> BatchOutput:
    """Logits and softmax probabilities for an N x D batch.

    ``params`` overrides individual parameters with graph tensors (so that
    gradients flow into them); missing names are taken from ``model`` as
    constants. ``mode`` overrides ``model.bn_mode``.
    """
    mode = model.bn_mode if mode is None else mode
    if mode not in BN_MODES:
        raise ValueError(f"unknown bn mode {mode!r}")
    x = x if isinstance(x, Tensor) else ad.constant(x)
    if x.data.ndim != 2 or x.shape[1] != model.in_dim:
        raise ad.ShapeError("forward", x.shape, (None, model.in_dim))
    if mode != "running" and x.shape[0] < 2:
        raise ValueError(f"bn mode {mode!r} needs at least 2 rows, got {x.shape[0]}")
    params = params or {}

    def p(name):
        return params[name] if name in params else ad.constant(model.params[name])

    h = x
    stats = []
    for k in range(model.n_bn):
        h = h @ p(f"fc{k}.weight") + p(f"fc{k}.bias")
        z, st = _normalize(h, model, k, mode, model.bn_eps)
        stats.append(st)
        h = ad.relu(z * p(f"bn{k}.gamma") + p(f"bn{k}.beta"))
    k = model.n_bn
    logits = h @ p(f"fc{k}.weight") + p(f"fc{k}.bias")
    return BatchOutput(logits=logits, probs=ad.softmax(logits), bn_stats=stats)


def predict(model: ModelState, x, mode: str | None = None) -> np.ndarray:
    return forward(model, x, mode=mode).predictions


# -- losses -----------------------------------------------------------------

def _rows(probs: Tensor, rows) -> Tensor:
    if rows is None:
        return probs
    rows = np.asarray(rows, dtype=np.intp)
    if rows.size == 0:
        raise ValueError("empty row selection")
    return ad.take_rows(probs, rows)


def _safe_log(p: Tensor) -> Tensor:
    return ad.log(ad.clamp(p, PROB_FLOOR, None))


def loss_ce(output: BatchOutput | Tensor, target: int, rows=None) -> Tensor:
    """Mean over ``rows`` of -log p[target]."""
    probs = output.probs if isinstance(output, BatchOutput) else output
    p = _rows(probs, rows)
    n, n_classes = p.shape
    if not 0 <= target < n_classes:
        raise ValueError(f"target {target} outside [0, {n_classes})")
    onehot = np.zeros((1, n_classes))
    onehot[0, target] = 1.0
    return -ad.sum(_safe_log(p) * onehot) / n


def loss_nll(output: BatchOutput | Tensor, labels) -> Tensor:
    """Mean cross-entropy against per-row integer labels."""
    probs = output.probs if isinstance(output, BatchOutput) else output
    labels = np.asarray(labels, dtype=np.intp)
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -ad.sum(_safe_log(probs) * onehot) / probs.shape[0]


def loss_entropy(output: BatchOutput | Tensor, rows=None) -> Tensor:
    """Mean Shannon entropy of the selected probability rows (0 log 0 := 0)."""
    probs = output.probs if isinstance(output, BatchOutput) else output
    p = _rows(probs, rows)
    return -ad.sum(p * _safe_log(p)) / p.shape[0]


def loss_kl(p_ref, p_att: BatchOutput | Tensor, rows=None) -> Tensor:
    """Mean over rows of KL(p_ref || p_att); ``p_ref`` is treated as a constant."""
    att = p_att.probs if isinstance(p_att, BatchOutput) else p_att
    att = _rows(att, rows)
    ref = np.asarray(p_ref.data if isinstance(p_ref, Tensor) else p_ref, dtype=np.float64)
    if ref.shape != att.shape:
        raise ad.ShapeError("loss_kl", ref.shape, att.shape)
    log_ref = np.log(np.maximum(ref, PROB_FLOOR))
    return ad.sum(ref * log_ref - _safe_log(att) * ref) / ref.shape[0]


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs)
    return -(probs * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1)


# -- pretraining ------------------------------------------------------------

@dataclass
class PretrainConfig:
    hidden: tuple[int, ...] = (32, 32)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum_bn: float = 0.1
    min_accuracy: float = 0.95
    seed: int = 0


def accuracy(model: ModelState, x, y, mode: str = "running") -> float:
    return float(np.mean(predict(model, x, mode=mode) == np.asarray(y)))


def pretrain(x: np.ndarray, y: np.ndarray, n_classes: int, config: PretrainConfig | None = None) -> ModelState:
    """Plain minibatch SGD on cross-entropy in batch-stats mode.

    Running BN statistics are tracked with an exponential moving average
    (unbiased variance). Raises :class:`PretrainError` if the final
    running-stats train accuracy is below ``config.min_accuracy``.
    """
    config = config or PretrainConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if len(x) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    model = init_model(x.shape[1], n_classes, tuple(config.hidden), rng)
    if config.epochs == 0:
        return model
    params = {k: v.copy() for k, v in model.params.items()}
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    names = list(params)
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            leaves = {k: Tensor(params[k], requires_grad=True) for k in names}
            current = model.replace(params=params)
            out = forward(current, x[idx], params=leaves, mode="batch")
            loss = loss_nll(out, y[idx])
            grads = ad.backward(loss, leaves.values())
            for k in names:
                params[k] = params[k] - config.lr * grads[leaves[k]]
            m = config.momentum_bn
            for k, (center, spread) in enumerate(out.bn_stats):
                n = len(idx)
                buffers[f"bn{k}.running_mean"] = (1 - m) * buffers[f"bn{k}.running_mean"] + m * center.data.ravel()
                buffers[f"bn{k}.running_var"] = (1 - m) * buffers[f"bn{k}.running_var"] + m * spread.data.ravel() * n / (n - 1)
    model = model.replace(params=params, buffers=buffers)
    acc = accuracy(model, x, y, mode="running")
    logger.info("pretrain finished: train accuracy %.4f", acc)
    if acc < config.min_accuracy:
        raise PretrainError(acc, config.min_accuracy, config.epochs)
    return model


# -- checkpoint I/O ---------------------------------------------------------

def _arr_to_json(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _arr_from_json(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def model_to_dict(model: ModelState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "n_bn": model.n_bn,
        "bn_mode": model.bn_mode,
        "bn_eps": model.bn_eps,
        "adaptable": list(model.adaptable),
        "params": {k: _arr_to_json(v) for k, v in model.params.items()},
        "buffers": {k: _arr_to_json(v) for k, v in model.buffers.items()},
    }


def model_from_dict(d: dict) -> ModelState:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"not a v{CHECKPOINT_VERSION} checkpoint: {d.get('format')!r} v{d.get('version')!r}")
    return ModelState(
        params={k: _arr_from_json(v) for k, v in d["params"].items()},
        buffers={k: _arr_from_json(v) for k, v in d["buffers"].items()},
        n_bn=int(d["n_bn"]),
        bn_mode=d["bn_mode"],
        adaptable=tuple(d["adaptable"]),
        bn_eps=float(d["bn_eps"]),
    )


def save_checkpoint(model: ModelState, path, meta: dict | None = None) -> None:
    payload = model_to_dict(model)
    payload["meta"] = meta or {}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> tuple[ModelState, dict]:
    d = json.loads(Path(path).read_text())
    return model_from_dict(d), d.get("meta", {})
