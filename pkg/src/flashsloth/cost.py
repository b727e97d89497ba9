"""Analytic token, FLOPs and KV-cache accounting for the compared models.

FLOPs convention, per transformer layer and sequence length ``L``::

    projections   8 * L * d^2
    score + mix   4 * L^2 * d         (prefill)
                  4 * L_ctx * d       (one decode step over L_ctx positions)
    MLP           4 * L * d * d_ff

summed over layers and multiplied by 2. Vision-encoder, compressor and query
module costs are separate line items and stay out of the LLM figure unless
asked for. Absolute numbers are therefore model-defined; only ratios are
comparable across rows.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .errors import ContractError

BENCHMARKS = ("gqa", "textvqa", "mme", "mmb", "pope", "average")
CSV_COLUMNS = (
    "method",
    "token_number",
    "prefill_flops",
    "decode_flops_per_token",
    "kv_bytes",
    "param_count",
    "delta_tokens_pct",
    "delta_flops_pct",
)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    param_count: int
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    policy: str  # "fixed" | "sap" | "hd" | "dynamic"
    native_image: str = "base"
    fixed_tokens: int = 0
    encoder_grid: int = 27
    s: int = 3
    hd_views: int = 5
    n_queries: int = 0
    dynamic_tokens: dict = field(default_factory=dict, hash=False, compare=False)


# Language-model dimensions are the public configurations of each backbone.
LLAVA_15 = ArchSpec("LLaVA-1.5-7B", 7_000_000_000, 32, 4096, 11008, 32, "fixed", fixed_tokens=576)
IMP = ArchSpec("IMP-3.1B", 3_100_000_000, 32, 2560, 10240, 32, "fixed", fixed_tokens=729)
QWEN2_VL = ArchSpec(
    "Qwen2-VL-2B",
    2_000_000_000,
    28,
    1536,
    8960,
    12,
    "dynamic",
    dynamic_tokens={"gqa": 352, "textvqa": 977, "mme": 646, "mmb": 385, "pope": 353, "average": 466},
)
INTERNVL2 = ArchSpec(
    "InternVL2-2B",
    2_000_000_000,
    24,
    2048,
    8192,
    16,
    "dynamic",
    dynamic_tokens={"gqa": 1699, "textvqa": 1668, "mme": 1478, "mmb": 1296, "pope": 1666, "average": 1561},
)
FLASHSLOTH_HD = ArchSpec(
    "FlashSloth-HD", 3_200_000_000, 32, 2560, 10240, 32, "hd", native_image="hd", n_queries=9
)
FLASHSLOTH = ArchSpec("FlashSloth", 3_200_000_000, 32, 2560, 10240, 32, "sap", n_queries=9)

TABLE_SPECS = (LLAVA_15, IMP, QWEN2_VL, INTERNVL2, FLASHSLOTH_HD, FLASHSLOTH)


def spec_by_name(name: str) -> ArchSpec:
    for s in TABLE_SPECS:
        if s.name == name:
            return s
    raise ContractError(f"unknown method {name!r}; known: {[s.name for s in TABLE_SPECS]}")


def count_tokens(spec: ArchSpec, image: str | None = None, benchmark: str = "average") -> int:
    """Visual-side prefill tokens: compressed visual tokens plus query tokens."""
    image = image or spec.native_image
    if spec.policy == "fixed":
        return spec.fixed_tokens + spec.n_queries
    if spec.policy == "dynamic":
        if benchmark not in spec.dynamic_tokens:
            raise ContractError(f"{spec.name}: no token count recorded for benchmark {benchmark!r}")
        return spec.dynamic_tokens[benchmark] + spec.n_queries
    per_view = (spec.encoder_grid // spec.s) ** 2
    if spec.encoder_grid % spec.s:
        raise ContractError(f"{spec.name}: grid {spec.encoder_grid} not divisible by s={spec.s}")
    if spec.policy == "sap" and image == "base":
        return per_view + spec.n_queries
    if spec.policy == "hd" and image == "hd":
        return spec.hd_views * per_view + spec.n_queries
    raise ContractError(f"{spec.name}: policy {spec.policy!r} is undefined for a {image!r} image")


def estimate_flops(spec: ArchSpec, seq_len: int, phase: str = "prefill") -> int:
    """LLM FLOPs for a prefill over ``seq_len`` positions or one decode step over that context."""
    if seq_len < 1:
        raise ContractError(f"seq_len must be >= 1, got {seq_len}")
    d, f = spec.d_model, spec.d_ff
    if phase == "prefill":
        per_layer = 8 * seq_len * d * d + 4 * seq_len * seq_len * d + 4 * seq_len * d * f
    elif phase == "decode":
        per_layer = 8 * d * d + 4 * seq_len * d + 4 * d * f
    else:
        raise ContractError(f"phase must be 'prefill' or 'decode', got {phase!r}")
    return 2 * spec.n_layers * per_layer


def sap_flops(grid: int, d: int, s: int, hidden: int | None = None) -> int:
    """Scoring MLP over every encoder token plus the weighted sums."""
    n = grid * grid
    d_h = hidden or d
    return 2 * (n * d * d_h + n * d_h + n * d)


def embq_flops(n_queries: int, text_len: int, n_visual: int, d_model: int, d_vis: int, d_e: int) -> int:
    text_stage = n_queries * d_model * d_e + 2 * text_len * d_model * d_e + 2 * n_queries * text_len * d_e
    vis_stage = n_queries * d_e * d_e + 2 * n_visual * d_vis * d_e + 2 * n_queries * n_visual * d_e
    return 2 * (text_stage + vis_stage + n_queries * d_e * d_model)


def kv_bytes(spec: ArchSpec, seq_len: int, bytes_per_value: int = 2) -> int:
    return 2 * spec.n_layers * seq_len * spec.d_model * bytes_per_value


def pct_change(value: float, reference: float) -> float:
    """Signed percentage change against ``reference`` (negative means fewer)."""
    if reference == 0:
        raise ContractError("reference value is zero")
    return 100.0 * (value - reference) / reference


def reduction_pct(value: float, reference: float) -> float:
    return -pct_change(value, reference)


@dataclass
class CostReport:
    method: str
    token_number: int
    prefill_flops: int
    decode_flops_per_token: int
    kv_bytes: int
    param_count: int
    delta_tokens_pct: float = 0.0
    delta_flops_pct: float = 0.0


def report(spec: ArchSpec, text_len: int = 0, benchmark: str = "average", bytes_per_value: int = 2) -> CostReport:
    tokens = count_tokens(spec, benchmark=benchmark)
    seq = tokens + text_len
    return CostReport(
        method=spec.name,
        token_number=tokens,
        prefill_flops=estimate_flops(spec, seq, "prefill"),
        decode_flops_per_token=estimate_flops(spec, seq + 1, "decode"),
        kv_bytes=kv_bytes(spec, seq, bytes_per_value),
        param_count=spec.param_count,
    )


def compare(
    specs,
    reference: str = LLAVA_15.name,
    text_len: int = 0,
    benchmark: str = "average",
    bytes_per_value: int = 2,
) -> list:
    """One report per spec with token and FLOPs deltas against ``reference``.

    The reference must be one of ``specs``. ``text_len`` extra prompt
    positions are added to every row (0 counts visual-side tokens only).
    """
    specs = list(specs)
    if not specs:
        raise ContractError("compare needs at least one spec")
    rows = [report(s, text_len, benchmark, bytes_per_value) for s in specs]
    ref = next((r for r in rows if r.method == reference), None)
    if ref is None:
        raise ContractError(f"reference {reference!r} is not among the compared specs")
    for r in rows:
        r.delta_tokens_pct = pct_change(r.token_number, ref.token_number)
        r.delta_flops_pct = pct_change(r.prefill_flops, ref.prefill_flops)
    return rows


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        d = asdict(r)
        w.writerow([f"{d[c]:.2f}" if isinstance(d[c], float) else d[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def to_json(rows) -> str:
    return json.dumps([{c: asdict(r)[c] for c in CSV_COLUMNS} for r in rows], indent=2)
