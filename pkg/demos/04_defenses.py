"""
Serving-side defenses against the same perturbations
====================================================

The attack is crafted once against the pretrained model. The server may
instead run median-centred BatchNorm or serve an EMA of its weights; the
attacker does not know which.
"""

import json

from ttattack.experiment import (ExperimentConfig, checkpoint_ref, make_splits, stage_attack, stage_deploy,
                                 stage_pretrain)

config = ExperimentConfig(seed=2)
splits = make_splits(config)
model, ckpt, _ = stage_pretrain(config, splits)
ref = checkpoint_ref(model, json.loads(ckpt)["meta"]["provenance"])
artifact = stage_attack(config, model, splits, ref)

# lr 0 isolates what the batch statistics alone carry. At the default
# step size the weights hardly move over 20 batches, so the faster
# server below makes the adaptation-dependent variants easier to tell apart.
runs = [{"tta.lr": 0.0}, {}, {"tta.defense": "medbn"}]
runs += [{"tta.lr": 0.1, **o} for o in ({}, {"tta.defense": "ema"}, {"tta.method": "entropy-filtered"},
                                         {"tta.method": "rpl"}, {"tta.defense": "medbn"})]
for overrides in runs:
    cfg = config.with_overrides(overrides)
    report = stage_deploy(cfg, model, artifact, splits, ref)
    label = ", ".join(f"{k.split('.')[1]}={v}" for k, v in overrides.items()) or "defaults"
    print(f"{label:32s} ASR {report.asr:.3f}  BA {report.ba:.3f}  label KL {report.label_kl:.5f}")
