# coding: utf-8
"""Training a small stack of blocks, then inspecting its mixing matrices.

Run with ``python demos/05_train_and_stability.py`` (takes several seconds).
"""

# %%
import numpy as np

from dsmix.analyze import adversarial_mhc_stack, depth_product, lite_stack, run_stack, stability_report
from dsmix.hyperblock import Variant
from dsmix.toytrain import ToyModel, TrainConfig, harvest_hres, make_task, train

data = make_task(0)

# %% [markdown]
# Train each variant on the same regression task for 300 steps.

# %%
harvests = {}
for v in Variant:
    model = ToyModel.create(v, L=6, seed=0)
    log = train(model, data, TrainConfig(steps=300, lr=1e-3))
    print(f"{v.value:14s} loss {log.records[0].loss:.4f} -> {log.smoothed_loss()[-1]:.2e}"
          f"  max ds error {log.column('max_ds_error').max():.1e}")
    if v is not Variant.UNCONSTRAINED:
        harvests[v.value] = harvest_hres(model, data, 64)

# %% [markdown]
# Boxplot summaries of column sums per matrix and over the depth product.

# %%
for s in stability_report(harvests):
    print(f"{s.label:22s} median {s.median:.6f}  range [{s.min:.6f}, {s.max:.6f}]")

# %% [markdown]
# A deliberately ill-conditioned 24-layer Sinkhorn stack drifts away from
# doubly stochastic; the permutation-mixture stack does not.

# %%
x = np.random.default_rng(0).normal(size=(4, 16))
for name, blocks in [("mhc", adversarial_mhc_stack(24)), ("mhc-lite", lite_stack(24))]:
    P = depth_product(run_stack(blocks, x))
    print(f"{name:9s} product column sums {np.round(P.sum(0), 6)}")
