"""
Queries that read the instruction first
=======================================

The query tokens attend over the text states, then use what they found
to look at the uncompressed visual tokens. The read-out is projected up
and added back onto the query states.
"""

# %%
import numpy as np

from flashsloth.embq import EmbQParams, embq_apply, text_query, visual_query
from flashsloth.tensor import Tensor

rng = np.random.default_rng(2)
d_model, d_vis, d_e = 32, 16, 24
params = EmbQParams.init(d_model, d_vis, d_e, rng)
layer = params.layers[0]

queries = Tensor(rng.standard_normal((9, d_model)))
text = Tensor(rng.standard_normal((6, d_model)))
raw_visual = Tensor(rng.standard_normal((729, d_vis)))

# %%
ftq, w_text = text_query(queries, text, layer, return_weights=True)
_, w_vis = visual_query(ftq, raw_visual, layer, return_weights=True)
print("text attention", w_text.shape, "rows sum to", w_text.data.sum(axis=1)[:3])
print("visual attention", w_vis.shape, "peak weight per query", np.round(w_vis.data.max(axis=1), 4))

# %%
# The text stage never receives visual tokens, so shuffling them cannot
# change its output. The full module does change.
shuffled = Tensor(rng.permutation(raw_visual.data) * 3.0)
print("text stage unchanged:", np.array_equal(text_query(queries, text, layer).data, ftq.data))
a = embq_apply(queries, text, raw_visual, params).data
b = embq_apply(queries, text, shuffled, params).data
print("fused output moved by:", np.abs(a - b).max())

# %%
# A zero up-projection turns residual fusion into a no-op.
layer.up_proj.data[:] = 0.0
print("zero up-projection is identity:", np.array_equal(embq_apply(queries, text, raw_visual, params).data, queries.data))
