"""
Tokens and FLOPs across methods
===============================

Token counts per method, prefill and decode FLOPs from a closed form,
and KV-cache bytes, each compared against a 576-token reference.
"""

# %%
from flashsloth.cost import FLASHSLOTH, IMP, INTERNVL2, TABLE_SPECS, compare, count_tokens, estimate_flops, reduction_pct, to_csv

print(to_csv(compare(TABLE_SPECS)))

# %%
for other in (IMP, INTERNVL2):
    print(f"token reduction vs {other.name}: {reduction_pct(count_tokens(FLASHSLOTH), count_tokens(other)):.1f}%")

# %%
# Same language model, 90 versus 576 visual-side positions.
ratio = estimate_flops(FLASHSLOTH, 90) / estimate_flops(FLASHSLOTH, 576)
print(f"prefill FLOPs ratio: {ratio:.3f}")

# %%
# Per benchmark, the dynamic-resolution models change their budget.
for bench in ("gqa", "textvqa", "mme", "mmb", "pope"):
    row = {r.method: r.token_number for r in compare(TABLE_SPECS, benchmark=bench)}
    print(f"{bench:<8} Qwen2-VL {row['Qwen2-VL-2B']:>5}  InternVL2 {row['InternVL2-2B']:>5}  FlashSloth {row['FlashSloth']}")
