"""Sample-wise targeted attacks on BatchNorm test-time adaptation, at desk scale.

Submodules: ``autodiff`` (reverse-mode tensors), ``nn`` (BN-MLP and losses),
``tta`` (online adaptation and defenses), ``trigger``, ``align`` (direction
solver and baselines), ``attack`` (perturbation crafting), ``simlab``
(synthetic data, streams and metrics) and ``experiment`` (configs and
seeded pipelines).
"""
__version__ = "0.1.0"
