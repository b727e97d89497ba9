"""
Shrinking a visual grid
=======================

A 27x27 grid of encoder features goes in, 81 tokens come out. Spatial
attention pooling scores every token with a small MLP and keeps a
softmax-weighted mix per 3x3 region.
"""

# %%
import numpy as np

from flashsloth.sap import SapParams, avg_pool, compress, init_compressor, sap_forward, sap_weights
from flashsloth.vision import hd_tile, synth_features

rng = np.random.default_rng(0)
grid = synth_features(seed=0, h=27, w=27, d=16)
print("encoder tokens:", grid.n_tokens)

# %%
params = SapParams.init(d=16, s=3, rng=rng)
pooled = sap_forward(grid, params)
print("after pooling:", pooled.n_tokens, "tokens of width", pooled.d)

# weights of the first region: nine numbers summing to one
alpha = sap_weights(grid, params).data
print("region 0 weights:", np.round(alpha[0], 3), "sum", alpha[0].sum())

# %%
# With the scoring head zeroed every region is weighted uniformly,
# which is exactly average pooling.
params.w2.data[:] = 0.0
gap = np.abs(sap_forward(grid, params).to_array() - avg_pool(grid, 3).to_array()).max()
print("flat scores vs average pooling, max gap:", gap)

# %%
# Same budget, other compressors.
for kind in ("avg_pool", "pixel_shuffle", "ldp"):
    out = compress(grid, kind, 3, init_compressor(kind, 16, 3, rng))
    print(f"{kind:<14} -> {out.n_tokens} tokens")

# %%
# High-resolution input: four quadrants plus a 2x2-mean thumbnail,
# each pooled separately, 5 * 81 = 405 tokens.
big = synth_features(seed=1, h=54, w=54, d=16)
tiles = hd_tile(big)
fresh = SapParams.init(16, 3, rng)
print("HD visual tokens:", sum(sap_forward(g, fresh).n_tokens for g in tiles.grids()))
