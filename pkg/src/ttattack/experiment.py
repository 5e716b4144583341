"""Experiment configuration, seeded pipeline stages and provenance replay.

One :class:`ExperimentConfig` describes a full run: data, pretraining,
trigger, attack, adaptation and stream. Every stage draws its randomness
from its own named sub-stream of the root seed, so sweeping one axis never
perturbs the draws of another. Every emitted file embeds the config that
produced it and can be regenerated from it byte for byte.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import itertools
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, nn
from .attack import AttackArtifact, AttackConfig, run_attack
from .nn import ModelState, PretrainConfig
from .simlab import Dataset, MetricsReport, StreamConfig, build_stream, make_blobs, run_deployment
from .trigger import TriggerSpec, patch_mask
from .tta import TtaConfig

CONFIG_SECTIONS = ("data", "pretrain", "trigger", "attack", "tta", "stream", "sweep")
SWEEP_AXES = {
    "attacker_ratio": "stream.attacker_ratio",
    "victim_frac": "stream.victim_frac",
    "epsilon": "attack.epsilon",
    "severity": "stream.severity",
    "tta_method": "tta.method",
    "mode": "attack.mode",
}


def substream_seed(root: int, name: str) -> int:
    """Independent 32-bit seed for the named stage of a run."""
    return int(np.random.SeedSequence([root, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass(frozen=True)
class DataSpec:
    n_classes: int = 3
    dim: int = 16
    n_per_class: int = 3000
    separation: float = 6.0
    temperature: float = 8.0
    shift_per_level: float = 0.5
    noise_per_level: float = 0.3
    # "trigger": the patch pixels carry no class signal; "none": every pixel does
    background: str = "trigger"
    train_frac: float = 1 / 3
    pool_size: int = 100

    def __post_init__(self):
        if self.background not in ("trigger", "none"):
            raise ValueError(f"unknown background {self.background!r}")
        if not 0 < self.train_frac < 1:
            raise ValueError("train_frac must lie in (0, 1)")
        if self.pool_size < 3:
            raise ValueError("attacker pool needs at least 3 rows")


@dataclass(frozen=True)
class TriggerConfig:
    kind: str = "patch"
    fraction: float = 0.15
    corners: tuple = ("tl", "tr", "bl", "br")
    fill: float = 1.0
    frequency: int = 10
    amplitude: float = 16 / 255
    channels: int = 1

    def spec(self, dim: int) -> TriggerSpec:
        return TriggerSpec.for_dim(self.kind, dim, channels=self.channels, fraction=self.fraction,
                                   corners=tuple(self.corners), fill=self.fill,
                                   frequency=self.frequency, amplitude=self.amplitude)


@dataclass(frozen=True)
class SweepAxes:
    attacker_ratio: tuple = ()
    victim_frac: tuple = ()
    epsilon: tuple = ()
    severity: tuple = ()
    tta_method: tuple = ()
    mode: tuple = ()

    def points(self) -> list[dict]:
        """Cartesian product of the non-empty axes, as dotted-path overrides."""
        axes = [(SWEEP_AXES[k], list(v)) for k, v in dataclasses.asdict(self).items() if v]
        if not axes:
            return [{}]
        paths = [p for p, _ in axes]
        return [dict(zip(paths, combo)) for combo in itertools.product(*(vals for _, vals in axes))]


def _pretrain_defaults() -> dict:
    d = dataclasses.asdict(PretrainConfig())
    d.pop("seed")
    return _listify(d)


def _attack_defaults() -> dict:
    d = AttackConfig().to_dict()
    d.pop("seed")
    return d


def _stream_defaults() -> dict:
    d = StreamConfig(n_batches=20).to_dict()
    d.pop("seed")
    return d


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    data: dict = field(default_factory=lambda: dataclasses.asdict(DataSpec()))
    pretrain: dict = field(default_factory=_pretrain_defaults)
    trigger: dict = field(default_factory=lambda: _listify(dataclasses.asdict(TriggerConfig())))
    attack: dict = field(default_factory=_attack_defaults)
    tta: dict = field(default_factory=lambda: TtaConfig().to_dict())
    stream: dict = field(default_factory=_stream_defaults)
    sweep: dict = field(default_factory=lambda: _listify(dataclasses.asdict(SweepAxes())))

    def __post_init__(self):
        self.validate()

    # -- typed views -------------------------------------------------------

    def data_spec(self) -> DataSpec:
        return DataSpec(**self.data)

    def pretrain_config(self) -> PretrainConfig:
        d = dict(self.pretrain)
        d["hidden"] = tuple(d["hidden"])
        return PretrainConfig(**d, seed=substream_seed(self.seed, "pretrain"))

    def trigger_spec(self) -> TriggerSpec:
        d = dict(self.trigger)
        d["corners"] = tuple(d["corners"])
        return TriggerConfig(**d).spec(self.data["dim"])

    def attack_config(self) -> AttackConfig:
        return AttackConfig.from_dict({**self.attack, "seed": substream_seed(self.seed, "attack")})

    def tta_config(self) -> TtaConfig:
        return TtaConfig(**self.tta)

    def stream_config(self) -> StreamConfig:
        return StreamConfig(**self.stream, seed=substream_seed(self.seed, "stream"))

    def sweep_axes(self) -> SweepAxes:
        return SweepAxes(**{k: tuple(v) for k, v in self.sweep.items()})

    def validate(self) -> None:
        """Build every typed view once so bad values fail early."""
        for name, section in self.sections().items():
            if not isinstance(section, dict):
                raise ValueError(f"config section {name!r} must be a mapping")
        self.data_spec()
        self.pretrain_config()
        self.trigger_spec()
        self.attack_config()
        self.tta_config()
        self.stream_config()
        self.sweep_axes()

    # -- serialization -----------------------------------------------------

    def sections(self) -> dict:
        return {k: getattr(self, k) for k in CONFIG_SECTIONS}

    def to_dict(self) -> dict:
        return _listify({"seed": self.seed, "out": self.out, **copy.deepcopy(self.sections())})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        unknown = set(d) - {"seed", "out", *CONFIG_SECTIONS}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        merged = {"seed": d.get("seed", base.seed), "out": d.get("out", base.out)}
        for name in CONFIG_SECTIONS:
            section = dict(getattr(base, name))
            extra = set(d.get(name) or {}) - set(section)
            if extra:
                raise ValueError(f"unknown keys in [{name}]: {sorted(extra)}")
            section.update(d.get(name) or {})
            merged[name] = section
        return cls(**merged)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with dotted-path keys replaced, e.g. ``{"attack.kappa": 5.0}``."""
        d = self.to_dict()
        for path, value in overrides.items():
            head, _, key = path.partition(".")
            if not key:
                if head not in ("seed", "out"):
                    raise ValueError(f"override {path!r} must name a section key")
                d[head] = value
                continue
            if head not in CONFIG_SECTIONS or key not in d[head]:
                raise ValueError(f"unknown config path {path!r}")
            d[head][key] = value
        return ExperimentConfig.from_dict(d)


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# -- pipeline stages -------------------------------------------------------

@dataclass
class Splits:
    train: Dataset
    pool: np.ndarray
    user: Dataset


def make_splits(config: ExperimentConfig) -> Splits:
    """Clean training rows, then attacker pool and user rows from the shifted draw.

    Training and deployment rows come from disjoint underlying samples.
    """
    spec = config.data_spec()
    background = ()
    if spec.background == "trigger":
        trig = config.trigger_spec()
        grid = TriggerSpec.for_dim("patch", spec.dim, channels=trig.channels, fraction=trig.fraction,
                                   corners=trig.corners)
        background = np.flatnonzero(np.tile(patch_mask(grid).ravel(), grid.channels)[: spec.dim])
    clean, shifted = make_blobs(spec.n_classes, spec.dim, spec.n_per_class, separation=spec.separation,
                                severity=config.stream["severity"], seed=substream_seed(config.seed, "data"),
                                shift_per_level=spec.shift_per_level, noise_per_level=spec.noise_per_level,
                                temperature=spec.temperature, background=background)
    n_train = int(round(spec.train_frac * len(clean)))
    if n_train + spec.pool_size >= len(clean):
        raise ValueError("not enough rows for train, attacker pool and users")
    return Splits(
        train=clean.subset(np.arange(n_train)),
        pool=shifted.x[n_train:n_train + spec.pool_size],
        user=shifted.subset(np.arange(n_train + spec.pool_size, len(shifted))),
    )


def provenance(config: ExperimentConfig, stage: str, **inputs) -> dict:
    return {"stage": stage, "package_version": __version__, "config": config.to_dict(), "inputs": inputs}


def model_digest(model: ModelState) -> str:
    """Hash of the weights and statistics only, so metadata never changes it."""
    return sha256_text(json.dumps(nn.model_to_dict(model), sort_keys=True))


def delta_digest(delta: np.ndarray) -> str:
    return sha256_text(json.dumps([list(np.shape(delta)), [float(v) for v in np.ravel(delta)]]))


def checkpoint_text(model: ModelState, meta: dict) -> str:
    return json.dumps({**nn.model_to_dict(model), "meta": meta}, sort_keys=True)


def checkpoint_ref(model: ModelState, prov: dict) -> dict:
    return {"sha256": model_digest(model), "provenance": prov}


def artifact_ref(artifact: AttackArtifact) -> dict:
    return {"sha256": delta_digest(artifact.delta), "provenance": artifact.provenance}


def stage_pretrain(config: ExperimentConfig, splits: Splits | None = None) -> tuple[ModelState, str, dict]:
    """Train the deployed model; returns it with its checkpoint text and summary."""
    splits = splits or make_splits(config)
    model = nn.pretrain(splits.train.x, splits.train.y, config.data["n_classes"], config.pretrain_config())
    summary = {
        "train_accuracy": nn.accuracy(model, splits.train.x, splits.train.y),
        "shifted_accuracy": nn.accuracy(model, splits.user.x, splits.user.y),
        "n_train": len(splits.train),
    }
    meta = {"provenance": provenance(config, "pretrain"), "summary": summary}
    return model, checkpoint_text(model, meta), summary


def stage_attack(config: ExperimentConfig, model: ModelState, splits: Splits | None = None,
                 checkpoint: dict | None = None) -> AttackArtifact:
    """Craft the perturbation set; ``checkpoint`` is the model's reference record."""
    splits = splits or make_splits(config)
    artifact = run_attack(model.with_mode("batch"), splits.pool, config.attack_config(), config.trigger_spec())
    artifact.provenance = provenance(config, "attack", checkpoint=checkpoint or {})
    return artifact


def artifact_text(artifact: AttackArtifact) -> str:
    return json.dumps(artifact.to_dict(), sort_keys=True)


def stage_deploy(config: ExperimentConfig, model: ModelState, artifact: AttackArtifact | None,
                 splits: Splits | None = None, checkpoint: dict | None = None) -> MetricsReport:
    """Serve the mixed stream under TTA and score it against the paired clean run."""
    splits = splits or make_splits(config)
    delta = artifact.delta if artifact is not None else None
    target = config.attack["target"]
    stream = build_stream(splits.user, splits.pool, delta, config.stream_config(), config.trigger_spec(), target)
    report = run_deployment(model, stream, config.tta_config(), target)
    report.provenance = provenance(config, "deploy", checkpoint=checkpoint or {},
                                   artifact=artifact_ref(artifact) if artifact is not None else None)
    return report


@dataclass
class RunOutputs:
    model: ModelState
    checkpoint: str
    artifact: AttackArtifact
    report: MetricsReport


def run_pipeline(config: ExperimentConfig) -> RunOutputs:
    """Data, pretraining, attack and deployment for one config."""
    splits = make_splits(config)
    model, ckpt, _ = stage_pretrain(config, splits)
    ref = checkpoint_ref(model, json.loads(ckpt)["meta"]["provenance"])
    artifact = stage_attack(config, model, splits, ref)
    report = stage_deploy(config, model, artifact, splits, ref)
    return RunOutputs(model, ckpt, artifact, report)


def _rebuild_model(ref: dict) -> tuple[ModelState, str]:
    config = ExperimentConfig.from_dict(ref["provenance"]["config"])
    model, ckpt, _ = stage_pretrain(config)
    if model_digest(model) != ref["sha256"]:
        raise ValueError("recorded checkpoint does not match the one rebuilt from its config")
    return model, ckpt


def _rebuild_artifact(ref: dict) -> AttackArtifact:
    prov = ref["provenance"]
    model, _ = _rebuild_model(prov["inputs"]["checkpoint"])
    artifact = stage_attack(ExperimentConfig.from_dict(prov["config"]), model, None, prov["inputs"]["checkpoint"])
    if delta_digest(artifact.delta) != ref["sha256"]:
        raise ValueError("recorded artifact does not match the one rebuilt from its config")
    return artifact


def regenerate(text: str) -> str:
    """Re-run the stage recorded in an emitted JSON file and return its new text.

    Upstream inputs are rebuilt from their own recorded configs and must
    hash to the recorded values.
    """
    doc = json.loads(text)
    prov = doc.get("provenance") or doc.get("meta", {}).get("provenance")
    if not prov:
        raise ValueError("file carries no provenance")
    config = ExperimentConfig.from_dict(prov["config"])
    stage, inputs = prov["stage"], prov.get("inputs", {})
    if stage == "pretrain":
        return stage_pretrain(config)[1]
    if not inputs.get("checkpoint"):
        raise ValueError("provenance lacks the checkpoint record")
    model, _ = _rebuild_model(inputs["checkpoint"])
    if stage == "attack":
        return artifact_text(stage_attack(config, model, None, inputs["checkpoint"]))
    if stage == "deploy":
        artifact = _rebuild_artifact(inputs["artifact"]) if inputs.get("artifact") else None
        return stage_deploy(config, model, artifact, None, inputs["checkpoint"]).to_json()
    raise ValueError(f"unknown stage {stage!r}")
