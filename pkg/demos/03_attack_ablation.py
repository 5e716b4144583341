"""
One seeded run of the attack ablation
=====================================

Pretrain the deployed model on clean blobs, craft perturbations for the
attacker pool under three objectives, then serve a mixed stream with TENT
and compare how often triggered victims land on the target class and how
much the label distribution of everyone else moves.
"""

import json

from ttattack.attack import negative_cosine_fraction
from ttattack.experiment import (ExperimentConfig, checkpoint_ref, make_splits, stage_attack, stage_deploy,
                                 stage_pretrain)

config = ExperimentConfig(seed=0)
splits = make_splits(config)
model, ckpt, summary = stage_pretrain(config, splits)
print("pretrain:", summary)
ref = checkpoint_ref(model, json.loads(ckpt)["meta"]["provenance"])

print(f"{'mode':14s} {'ASR':>6s} {'BA':>6s} {'label KL':>9s} {'s<0':>5s}")
for mode in ("cls-only", "ours", "cls-plus-stl", "pcgrad"):
    cfg = config.with_overrides({"attack.mode": mode})
    artifact = stage_attack(cfg, model, splits, ref)
    report = stage_deploy(cfg, model, artifact, splits, ref)
    print(f"{mode:14s} {report.asr:6.3f} {report.ba:6.3f} {report.label_kl:9.5f} "
          f"{negative_cosine_fraction(artifact):5.2f}")

# The last report also carries per-role entropies under the pretrained model.
for role, stats in report.entropy.items():
    if stats["defined"]:
        print(f"entropy {role:17s} mean {stats['mean']:.3f}")
