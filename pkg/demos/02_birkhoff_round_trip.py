# coding: utf-8
"""Building doubly stochastic matrices from permutations, and back.

Run with ``python demos/02_birkhoff_round_trip.py``.
"""

# %% [markdown]
# Any convex combination of permutation matrices is doubly stochastic.
# For n=4 there are 24 of them; the identity sits at index 0.

# %%
import numpy as np

from dsmix.birkhoff import birkhoff_decompose, build_basis, combine, describe_weights, random_simplex
from dsmix.matcore import ds_error

basis = build_basis(4)
print("basis size:", basis.size, "combo matrix shape:", basis.combo_matrix.shape)

rng = np.random.default_rng(1)
w = random_simplex(rng, basis.size)
H = combine(basis, w)
print("H =\n", np.round(H, 4))
print("ds error:", ds_error(H).total)

# %% [markdown]
# Greedy decomposition recovers some weight vector that rebuilds H.
# It is usually sparser than the one we started from.

# %%
w_back = birkhoff_decompose(H, basis)
print("nonzero weights in:", np.count_nonzero(w), " out:", np.count_nonzero(w_back > 0))
for term in describe_weights(basis, w_back):
    print(f"  perm {term['perm']}  weight {term['weight']:.4f}")
print("reconstruction error:", np.abs(combine(basis, w_back) - H).max())
