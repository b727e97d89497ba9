"""
A small ablation sweep
======================

Every value on one axis is trained with the same data and seed, then
scored on held-out examples. The n=0 row has no query module at all.
"""

# %%
from flashsloth.ablation import run_ablation, to_csv, variants
from flashsloth.config import TrainConfig
from flashsloth.model import ModelConfig

base = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ff=32, d_vis=4, grid=6,
                   n_queries=2, embq_layer=2, embq_dim=8, max_seq=256)
for axis in ("query_count", "insertion_layer"):
    print(axis, [label for label, _ in variants(axis, base)])

# %%
plan = TrainConfig(n_train=4, n_eval=4, stage1_steps=3, stage2_steps=20, lr1=1e-2, lr2=3e-3)
rows = run_ablation("query_count", base, plan, threads=2)
print(to_csv(rows))
