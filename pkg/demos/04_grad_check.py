# coding: utf-8
"""Comparing the hand-written backward pass with central differences.

Run with ``python demos/04_grad_check.py``.
"""

# %%
from dsmix.grad import grad_check_seed
from dsmix.hyperblock import Variant

# %% [markdown]
# Each report lists the worst relative error per parameter group.

# %%
for v in Variant:
    rep = grad_check_seed(v, seed=0, n=4, C=8)
    print(rep.table())
    print()
