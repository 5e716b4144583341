"""Online BN-affine test-time adaptation and the served-model defenses."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .nn import BatchOutput, ModelState

logger = logging.getLogger(__name__)

METHODS = ("tent", "rpl", "entropy-filtered")
DEFENSES = ("none", "medbn", "ema")


@dataclass(frozen=True)
class TtaConfig:
    method: str = "tent"
    lr: float = 0.01
    # None -> 0.4 * ln(C), resolved against the model at adaptation time
    entropy_threshold: float | None = None
    gce_q: float = 0.8
    defense: str = "none"
    ema_alpha: float = 0.99

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown TTA method {self.method!r}")
        if self.defense not in DEFENSES:
            raise ValueError(f"unknown defense {self.defense!r}")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.entropy_threshold is not None and not self.entropy_threshold > 0:
            raise ValueError("entropy threshold must be positive")
        if not 0 < self.gce_q <= 1:
            raise ValueError("gce_q must lie in (0, 1]")
        if not 0 <= self.ema_alpha < 1:
            raise ValueError("ema_alpha must lie in [0, 1)")

    def threshold_for(self, n_classes: int) -> float:
        return 0.4 * math.log(n_classes) if self.entropy_threshold is None else self.entropy_threshold

    def to_dict(self) -> dict:
        return asdict(self)


def _bn_mode(config: TtaConfig) -> str:
    return "median" if config.defense == "medbn" else "batch"


def _objective(out: BatchOutput, config: TtaConfig, n_classes: int) -> Tensor | None:
    if config.method == "tent":
        return nn.loss_entropy(out)
    if config.method == "rpl":
        pseudo = out.predictions
        onehot = np.zeros(out.probs.shape)
        onehot[np.arange(len(pseudo)), pseudo] = 1.0
        p_hat = ad.sum(out.probs * onehot, axis=1)
        # generalized cross-entropy (1 - p^q) / q
        pq = ad.exp(ad.log(ad.clamp(p_hat, nn.PROB_FLOOR, None)) * config.gce_q)
        return ad.mean(1.0 - pq) / config.gce_q
    ent = nn.entropy_rows(out.probs.data)
    keep = ent < config.threshold_for(n_classes)
    if not keep.any():
        return None
    if keep.all():
        return nn.loss_entropy(out)
    return nn.loss_entropy(out, rows=np.flatnonzero(keep))


def adapt_step(model: ModelState, batch, config: TtaConfig) -> tuple[ModelState, BatchOutput]:
    """One SGD step on the adaptable parameters, then the served forward pass.

    Returns the updated model and its prediction on the same batch. When the
    entropy filter drops every row the model is returned unchanged.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("TTA needs a batch of at least 2 rows")
    mode = _bn_mode(config)
    leaves = {k: Tensor(model.params[k], requires_grad=True) for k in model.adaptable}
    out = nn.forward(model, x, params=leaves, mode=mode)
    loss = _objective(out, config, model.n_classes)
    if loss is None:
        logger.info("entropy filter removed all %d rows; skipping update", len(x))
        new_model = model
    else:
        grads = ad.backward(loss, leaves.values())
        new_model = model.with_params({k: model.params[k] - config.lr * grads[leaf] for k, leaf in leaves.items()})
    return new_model, nn.forward(new_model, x, mode=mode)


def ema_update(ema: ModelState, latest: ModelState, alpha: float) -> ModelState:
    """``alpha * ema + (1 - alpha) * latest`` over the adaptable parameters."""
    return ema.with_params({k: alpha * ema.params[k] + (1.0 - alpha) * latest.params[k] for k in latest.adaptable})


class TtaServer:
    """Stateful online adaptation loop with an optional defense on the served model.

    ``medbn`` uses median-centred normalization for both adaptation and
    serving; ``ema`` adapts the live model but serves an exponential moving
    average of its weights.
    """

    def __init__(self, model: ModelState, config: TtaConfig):
        self.config = config
        self.model = model.with_mode(_bn_mode(config))
        self.ema = self.model if config.defense == "ema" else None
        self.steps = 0

    @property
    def served_model(self) -> ModelState:
        return self.ema if self.ema is not None else self.model

    def step(self, batch) -> BatchOutput:
        self.model, out = adapt_step(self.model, batch, self.config)
        self.steps += 1
        if self.ema is None:
            return out
        self.ema = ema_update(self.ema, self.model, self.config.ema_alpha)
        return nn.forward(self.ema, np.asarray(batch, dtype=np.float64))


def apply_defense(models, config: TtaConfig) -> ModelState:
    """Effective served model after a sequence of adapted states."""
    models = list(models)
    if config.defense != "ema":
        return models[-1].with_mode(_bn_mode(config))
    ema = models[0]
    for m in models[1:]:
        ema = ema_update(ema, m, config.ema_alpha)
    return ema
