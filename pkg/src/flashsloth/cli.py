"""Command-line entry point: ``python -m flashsloth <command>``.

Exit codes: 0 success, 1 usage, 2 validation (bad config, shape or
capacity problems), 3 a check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import ablation, cost
from .config import RunConfig, load_config
from .errors import CapacityError, ConfigError, ContractError, DimensionError
from .gradcheck import GRAD_TOL, gradcheck, tiny_config
from .model import FlashSloth, save_checkpoint
from .trainer import FreezeMask, ToyDataset, evaluate, train_stage, write_loss_csv
from .vision import detokenize, synth_features

EXIT_USAGE, EXIT_VALIDATION, EXIT_CHECK = 1, 2, 3
DEMO_PROMPT = "Which quadrant is brightest?"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Usage(Exception):
    pass


class _CheckFailed(Exception):
    pass


def _run_config(args) -> RunConfig:
    rc = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        rc.model = rc.model.replace(seed=args.seed)
        rc.train.data_seed = args.seed
    if getattr(args, "hd", False):
        rc.model = rc.model.replace(hd=True)
    rc.model.validate()
    return rc


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def checksum(params: dict, names=None) -> str:
    h = hashlib.sha256()
    for n in sorted(names if names is not None else params):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n].data).tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# commands


def cmd_demo(args) -> int:
    rc = _run_config(args)
    c = rc.model
    model = FlashSloth(c)
    side = c.grid * (2 if c.hd else 1)
    image = synth_features(c.seed, side, side, c.d_vis)
    seq = model.sequence(image, DEMO_PROMPT)
    answer = model.generate(image, DEMO_PROMPT, max_new=rc.train.max_new)

    n_vis, n_text, n_q = (seq.visual.shape[0], len(seq.turns[0].text_ids), seq.n_queries)
    arch = ablation.toy_arch(c)
    print(f"config: layers={c.n_layers} d_model={c.d_model} compressor={c.compressor} s={c.s} "
          f"queries={c.n_queries} embq_layer={ablation._layer_label(c.embq_layer)} fusion={c.fusion} "
          f"hd={'true' if c.hd else 'false'}")
    print(f"image: {side}x{side}x{c.d_vis} seed={c.seed} raw_tokens={seq.raw_visual.shape[0]}")
    print(f"visual={n_vis} queries={n_q} total_visual_side={n_vis + n_q}")
    print(f"text={n_text} prefill={len(seq)}")
    print(f"prefill_flops={cost.estimate_flops(arch, len(seq), 'prefill')} "
          f"decode_flops_per_token={cost.estimate_flops(arch, len(seq) + 1, 'decode')}")
    print(f"prompt: {DEMO_PROMPT}")
    print(f"answer_ids={answer}")
    print(f"answer={detokenize(answer)!r} stopped={'eoa' if len(answer) < rc.train.max_new else 'max_new'}")
    return 0


def cmd_ablate(args) -> int:
    if args.axis is None:
        raise _Usage(f"--axis is required; choose from {', '.join(ablation.AXES)}")
    if args.axis not in ablation.AXES:
        raise _Usage(f"unknown axis {args.axis!r}; choose from {', '.join(ablation.AXES)}")
    rc = _run_config(args)
    rows = ablation.run_ablation(args.axis, rc.model, rc.train, rc.cost.text_len)
    _emit(ablation.to_csv(rows), args.out)
    return 0


def cmd_cost(args) -> int:
    rc = _run_config(args)
    rows = cost.compare(cost.TABLE_SPECS, rc.cost.reference, rc.cost.text_len, rc.cost.benchmark, rc.cost.bytes_per_value)
    text = cost.to_json(rows) + "\n" if args.out and str(args.out).endswith(".json") else cost.to_csv(rows)
    _emit(text, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    # without --config the tiny two-block model is used; the default model is too wide for differences
    if args.config:
        config = _run_config(args).model
    else:
        config = tiny_config(seed=args.seed or 0)
    rep = gradcheck(config, seed=args.seed or 0)
    for group in sorted(rep.per_group):
        print(f"{group:<12} max_rel_err={rep.per_group[group]:.3e}")
    print(f"probed={rep.probed} worst={rep.worst:.3e} tol={GRAD_TOL:.0e} {'PASS' if rep.ok() else 'FAIL'}")
    if not rep.ok():
        raise _CheckFailed(f"gradient mismatch {rep.worst:.3e} > {GRAD_TOL:.0e}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    model = FlashSloth(rc.model)
    t = rc.train
    side = rc.model.grid * (2 if rc.model.hd else 1)
    train, held = ToyDataset.generate(t.data_seed, t.n_train + t.n_eval, side, rc.model.d_vis).split(t.n_train)
    bs = t.batch_size or None

    s1 = FreezeMask.stage1()
    frozen = [n for n in model.params if not s1.is_trainable(n)]
    before = checksum(model.params, frozen)
    l1 = train_stage(model, train, s1, t.stage1_steps, t.lr1, bs)
    after = checksum(model.params, frozen)
    write_loss_csv(l1, out / "stage1_loss.csv")
    print(f"stage1 steps={len(l1)} loss {l1[0]:.6f} -> {l1[-1]:.6f} frozen_checksum {before} -> {after}")
    if before != after:
        raise _CheckFailed("stage 1 changed frozen parameters")

    l2 = train_stage(model, train, FreezeMask.stage2(), t.stage2_steps, t.lr2, bs)
    write_loss_csv(l2, out / "stage2_loss.csv")
    print(f"stage2 steps={len(l2)} loss {l2[0]:.6f} -> {l2[-1]:.6f}")
    if len(held):
        print(f"held_out_accuracy={evaluate(model, held, t.max_new):.4f} n={len(held)}")
    save_checkpoint(out / "model.slth", rc.model, model.params)
    print(f"wrote {out / 'stage1_loss.csv'} {out / 'stage2_loss.csv'} {out / 'model.slth'}")
    return 0


COMMANDS = {
    "demo": (cmd_demo, "compress, prefill and decode one synthetic image"),
    "ablate": (cmd_ablate, "train and score every value on one ablation axis"),
    "cost": (cmd_cost, "token / FLOPs / KV-cache table for the compared methods"),
    "gradcheck": (cmd_gradcheck, "tape gradients vs central differences"),
    "train": (cmd_train, "two-stage toy training with loss CSVs and a checkpoint"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flashsloth", description="Embedded visual compression on a toy multimodal LM.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", metavar="PATH", help="JSON run config")
        sp.add_argument("--seed", type=int, metavar="N")
        sp.add_argument("--hd", action="store_true", help="high-resolution tiling (four tiles plus thumbnail)")
        sp.add_argument("--out", metavar="PATH")
        sp.add_argument("--axis", metavar="NAME", help="ablation axis: " + ", ".join(ablation.AXES))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command][0](args)
    except _Usage as e:
        parser.print_usage(sys.stderr)
        print(f"flashsloth {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ContractError, DimensionError, CapacityError, OSError) as e:
        print(f"flashsloth {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except _CheckFailed as e:
        print(f"flashsloth {args.command}: check failed: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
