"""Ablation sweeps over the compressor and query-module design axes.

Every variant is a :class:`ModelConfig` derived from a base config, trained
with the same data and seed, then scored on a held-out toy split together
with its analytic cost.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor

from .config import TrainConfig
from .cost import ArchSpec, embq_flops, estimate_flops
from .errors import ContractError
from .model import FlashSloth, ModelConfig, scaled_layer
from .trainer import FreezeMask, ToyDataset, evaluate, train_stage

AXES = ("compressor", "query_count", "query_init", "fusion", "embq_dim", "embq_layers", "insertion_layer")

QUERY_COUNTS = (0, 6, 9, 12, 15)
QUERY_INITS = ("fixed_dot", "random", "dot")
FUSION_MODES = ("add", "replace", "gate")
EMBQ_DIMS = (576, 768, 1152, 2560)
EMBQ_DEPTHS = (1, 2, 3)
INSERTION_LAYERS = (4, 8, 16, 24, (8, 16, 24))  # quoted against the 32-layer reference
COMPRESSOR_KINDS = ("avg_pool", "sap", "pixel_shuffle", "ldp")

COLUMNS = (
    "axis",
    "variant",
    "compressor",
    "s",
    "n_queries",
    "embq_layer",
    "embq_dim",
    "embq_n_layers",
    "fusion",
    "query_init",
    "token_number",
    "embq_param_count",
    "prefill_flops",
    "embq_flops",
    "final_loss",
    "eval_accuracy",
)


def _layer_label(k) -> str:
    return "/".join(str(v) for v in k) if isinstance(k, tuple) else str(k)


def variants(axis: str, base: ModelConfig) -> list:
    """``(label, config)`` pairs enumerating one axis around ``base``."""
    if axis == "compressor":
        out = [("baseline", base.replace(compressor="sap", s=1, n_queries=0))]
        for kind in COMPRESSOR_KINDS:
            out.append((kind, base.replace(compressor=kind, n_queries=0)))
            out.append((kind + "+embq", base.replace(compressor=kind, n_queries=base.n_queries or 9)))
        return out
    if axis == "query_count":
        return [(str(n), base.replace(n_queries=n)) for n in QUERY_COUNTS]
    if axis == "query_init":
        return [(m, base.replace(query_init=m)) for m in QUERY_INITS]
    if axis == "fusion":
        return [(m, base.replace(fusion=m)) for m in FUSION_MODES]
    if axis == "embq_dim":
        return [(str(d), base.replace(embq_dim=d)) for d in EMBQ_DIMS]
    if axis == "embq_layers":
        return [(str(n), base.replace(embq_n_layers=n)) for n in EMBQ_DEPTHS]
    if axis == "insertion_layer":
        out = []
        for k in INSERTION_LAYERS:
            if isinstance(k, tuple):
                label, mapped = "multi", tuple(sorted({scaled_layer(v, base.n_layers) for v in k}))
            else:
                label, mapped = str(k), scaled_layer(k, base.n_layers)
            out.append((label, base.replace(embq_layer=mapped)))
        return out
    raise ContractError(f"unknown axis {axis!r}; expected one of {', '.join(AXES)}")


def toy_arch(config: ModelConfig) -> ArchSpec:
    return ArchSpec(
        "toy", 0, config.n_layers, config.d_model, config.d_ff, config.n_heads, "fixed",
        fixed_tokens=config.n_visual_tokens, n_queries=config.n_queries,
    )


def run_variant(axis: str, label: str, config: ModelConfig, plan: TrainConfig, text_len: int = 0) -> dict:
    config = config.validate()
    model = FlashSloth(config)
    side = config.grid * (2 if config.hd else 1)
    train, held = ToyDataset.generate(plan.data_seed, plan.n_train + plan.n_eval, side, config.d_vis).split(plan.n_train)
    bs = plan.batch_size or None
    losses = train_stage(model, train, FreezeMask.stage1(), plan.stage1_steps, plan.lr1, bs)
    losses += train_stage(model, train, FreezeMask.stage2(), plan.stage2_steps, plan.lr2, bs)
    acc = evaluate(model, held, plan.max_new)

    tokens = config.n_visual_tokens + config.n_queries
    hooks = len(config.hook_layers) * config.embq_n_layers if config.n_queries else 0
    raw = config.grid * config.grid * (5 if config.hd else 1)
    module = hooks * embq_flops(config.n_queries, max(text_len, 1), raw, config.d_model, config.d_vis, config.embq_dim)
    return {
        "axis": axis,
        "variant": label,
        "compressor": config.compressor,
        "s": config.s,
        "n_queries": config.n_queries,
        "embq_layer": _layer_label(config.embq_layer) if config.n_queries else "-",
        "embq_dim": config.embq_dim,
        "embq_n_layers": config.embq_n_layers,
        "fusion": config.fusion,
        "query_init": config.query_init,
        "token_number": tokens,
        "embq_param_count": sum(t.data.size for n, t in model.params.items() if n.startswith("embq.")),
        "prefill_flops": estimate_flops(toy_arch(config), tokens + text_len, "prefill"),
        "embq_flops": module,
        "final_loss": f"{losses[-1]:.6f}",
        "eval_accuracy": f"{acc:.4f}",
    }


def thread_cap(default: int = 1) -> int:
    raw = os.environ.get("SLOTH_THREADS", "")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        raise ContractError(f"SLOTH_THREADS must be a positive integer, got {raw!r}") from None


def run_ablation(axis: str, base: ModelConfig, plan: TrainConfig, text_len: int = 0, threads: int | None = None) -> list:
    todo = variants(axis, base)
    threads = threads or thread_cap()
    if threads == 1:
        return [run_variant(axis, label, cfg, plan, text_len) for label, cfg in todo]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_variant, axis, label, cfg, plan, text_len) for label, cfg in todo]
        return [f.result() for f in futures]  # submission order, so the report is stable


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
