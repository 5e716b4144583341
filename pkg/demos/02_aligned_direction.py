"""
Combining a conflicting pair of gradients
=========================================

The attack gradient ``a`` and the stealth gradient ``c`` usually point in
opposing directions. Here we take a two-dimensional pair and compare the
update directions the different combiners produce.
"""

import numpy as np

from ttattack import align

a = np.array([1.0, 0.2])
c = np.array([-0.6, 0.5])
print("cosine(a, c) =", round(align.cosine(a, c), 3))

sol = align.solve_direction(a, c, gamma=0.5, kappa=10.0)
print(f"trust region: w* = {sol.w_star:.3f}, lam = {sol.lam:.2f}, xi = {sol.xi:.3f}")

directions = {
    "cls-only": a,
    "sum": align.baseline_combine(a, c, "sum"),
    "pcgrad": align.baseline_combine(a, c, "pcgrad"),
    "cagrad": align.baseline_combine(a, c, "cagrad"),
    "euclid-tr": align.baseline_combine(a, c, "euclid-tr"),
    "ours": sol.d,
}

# A step along -d lowers a loss at rate g^T d. The trust region keeps a.d
# at least as large as cls-only and only bounds how much c may suffer.
print(f"{'method':10s} {'a.d':>8s} {'c.d':>8s}")
for name, d in directions.items():
    print(f"{name:10s} {a @ d:8.3f} {c @ d:8.3f}")

# Raising kappa stretches the ellipse along the disagreement axis and
# keeps the direction closer to a.
for kappa in (0.0, 1.0, 10.0, 100.0):
    d = align.solve_direction(a, c, 0.5, kappa).d
    print(f"kappa={kappa:6.1f}  angle to a = {np.degrees(np.arccos(align.cosine(a, d))):5.1f} deg")
