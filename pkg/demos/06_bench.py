# coding: utf-8
"""Wall-clock cost of one block forward per variant.

Run with ``python demos/06_bench.py``.
"""

# %%
from dsmix.bench import bench_block
from dsmix.hyperblock import Variant

for v in Variant:
    r = bench_block(v, n=4, C=768, reps=300)
    print(f"{v.value:14s} median {r.median_ns / 1e3:8.1f} us  (IQR {r.q1_ns / 1e3:.1f}-{r.q3_ns / 1e3:.1f})")
