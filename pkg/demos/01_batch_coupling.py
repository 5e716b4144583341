"""
Batch statistics couple the rows of a batch
===========================================

With batch-stats BatchNorm, a row's logits depend on every other row in
the batch. That shared channel is what an attacker exploits: nudging its
own rows moves the statistics and so the predictions of other users.
"""

import numpy as np

from ttattack import nn

rng = np.random.default_rng(0)
model = nn.init_model(8, 3, rng=rng)
batch = rng.uniform(0, 1, size=(10, 8))

# Perturb only the last three rows and watch row 0.
nudged = batch.copy()
nudged[-3:] += 0.2

for mode in ("batch", "running"):
    before = nn.forward(model, batch, mode=mode).probs.data[0]
    after = nn.forward(model, nudged, mode=mode).probs.data[0]
    print(f"{mode:8s} row 0 probs {np.round(before, 4)} -> {np.round(after, 4)}")

# The same effect shows up in the gradient: the loss of row 0 has a
# non-zero gradient on the other rows only when statistics are shared.
from ttattack.autodiff import Tensor, backward

for mode in ("batch", "running"):
    x = Tensor(batch, requires_grad=True)
    loss = nn.loss_ce(nn.forward(model, x, mode=mode), target=1, rows=[0])
    g = backward(loss, [x])[x]
    print(f"{mode:8s} |d loss(row 0) / d rows 1..9| = {np.abs(g[1:]).max():.3e}")
