"""
Reverse-mode autodiff on a tape
===============================

Every operation the encoder uses records itself on a Tape. ``backward``
walks the tape in reverse; ``grad_check`` compares the result with central
differences.
"""

import numpy as np

from jtner import autodiff as ad
from jtner.autodiff import Tape, Tensor, backward, grad_check

# %%
# A tensor used twice gets the sum of both path gradients.
w = Tensor([0.5, -1.0, 2.0], requires_grad=True, name="w")
with Tape() as tape:
    loss = ad.add(ad.tanh(w), ad.mul(w, w)).sum()
print("tape length:", len(tape))
print("dloss/dw:", backward(loss, tape)["w"])
print("by hand: ", 1 - np.tanh(w.data) ** 2 + 2 * w.data)

# %%
# Softmax subtracts the row max, so huge logits stay finite.
print(ad.softmax_rows(Tensor([[1000.0, 1000.0, 999.0]])).data)

# %%
# Finite-difference check of cross-entropy on random logits.
logits = {"x": Tensor(np.random.default_rng(1).normal(size=(2, 3)), requires_grad=True, name="x")}
print("worst relative error:", grad_check(lambda p: ad.cross_entropy(p["x"], [2, 0]), logits))
