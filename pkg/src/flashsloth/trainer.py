"""Two-stage optimisation on a synthetic instruction dataset.

Stage 1 moves only the projector and the compressor; stage 2 moves
everything on the language side (the synthetic encoder has no parameters).
The update is Adam with bias correction and no weight decay.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .model import FlashSloth, MixedSequence, decode_greedy, forward, param_group
from .tensor import Tape, Tensor, backward, getitem, log_softmax
from .vision import VisualGrid, detokenize, synth_features

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

QUADRANTS = ("tl", "tr", "bl", "br")
INSTRUCTIONS = {
    "brightest": "Which quadrant is brightest?",
    "darkest": "Which quadrant is darkest?",
}


@dataclass
class FreezeMask:
    trainable: dict = field(default_factory=dict)

    def is_trainable(self, name: str) -> bool:
        return bool(self.trainable.get(param_group(name), False))

    @classmethod
    def stage1(cls) -> "FreezeMask":
        return cls({"projector": True, "sap": True, "compressor": True})

    @classmethod
    def stage2(cls) -> "FreezeMask":
        # "encoder" would be the vision tower; the synthetic one owns no parameters
        return cls(
            {
                "encoder": False,
                "projector": True,
                "sap": True,
                "compressor": True,
                "llm": True,
                "queries": True,
                "embq": True,
            }
        )


# --------------------------------------------------------------------------
# data


@dataclass
class Example:
    grid_seed: int
    instruction: str
    answer: str


def quadrant_answer(grid: VisualGrid, kind: str) -> str:
    """Quadrant with the largest (``brightest``) or smallest mean feature value."""
    arr = grid.to_array().mean(axis=2)
    h2, w2 = grid.h // 2, grid.w // 2
    means = [arr[:h2, :w2].mean(), arr[:h2, w2:].mean(), arr[h2:, :w2].mean(), arr[h2:, w2:].mean()]
    pick = int(np.argmax(means)) if kind == "brightest" else int(np.argmin(means))
    return QUADRANTS[pick]


@dataclass
class ToyDataset:
    examples: list
    grid: int
    d_vis: int

    @classmethod
    def generate(cls, seed: int, n: int, grid: int, d_vis: int) -> "ToyDataset":
        """``n`` examples whose answers are a function of the image and the instruction."""
        rng = np.random.default_rng(seed)
        kinds = sorted(INSTRUCTIONS)
        examples = []
        for i in range(n):
            gs = int(rng.integers(0, 2**31 - 1))
            kind = kinds[i % len(kinds)]
            image = synth_features(gs, grid, grid, d_vis)
            examples.append(Example(gs, INSTRUCTIONS[kind], quadrant_answer(image, kind)))
        return cls(examples, grid, d_vis)

    def split(self, n_train: int) -> tuple:
        return (
            ToyDataset(self.examples[:n_train], self.grid, self.d_vis),
            ToyDataset(self.examples[n_train:], self.grid, self.d_vis),
        )

    def image(self, ex: Example) -> VisualGrid:
        return synth_features(ex.grid_seed, self.grid, self.grid, self.d_vis)

    def __len__(self) -> int:
        return len(self.examples)


def dataset_for(model: FlashSloth, seed: int, n: int) -> ToyDataset:
    side = model.config.grid * (2 if model.config.hd else 1)
    return ToyDataset.generate(seed, n, side, model.config.d_vis)


# --------------------------------------------------------------------------
# objective


def loss(logits: Tensor, seq: MixedSequence) -> Tensor:
    """Mean next-token cross-entropy over every answer position of ``seq``."""
    rows, targets = [], []
    for turn, (*_, a0, a1) in zip(seq.turns, seq.turn_spans()):
        rows.extend(range(a0 - 1, a1 - 1))
        targets.extend(turn.answer_ids)
    if not rows:
        raise ContractError("loss needs a non-empty answer segment")
    logp = log_softmax(getitem(logits, np.asarray(rows, dtype=np.intp)))
    picked = getitem(logp, (np.arange(len(rows)), np.asarray(targets, dtype=np.intp)))
    return -picked.mean()


def example_loss(model: FlashSloth, data: ToyDataset, ex: Example) -> Tensor:
    seq = model.sequence(data.image(ex), ex.instruction, ex.answer)
    return loss(forward(seq, model.params, model.config), seq)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, named: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in named.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def trainable_params(model: FlashSloth, mask: FreezeMask) -> dict:
    out = {}
    for name, p in model.params.items():
        if not mask.is_trainable(name):
            continue
        if name == "queries" and model.config.query_init == "fixed_dot":
            continue
        out[name] = p
    return out


def train_stage(
    model: FlashSloth,
    dataset: ToyDataset,
    mask: FreezeMask,
    steps: int,
    lr: float,
    batch_size: int | None = None,
) -> list:
    """Run ``steps`` Adam updates on the unfrozen groups; returns the per-step batch loss.

    Batches cycle through the dataset in order. The loss at step ``t`` is
    measured before update ``t`` is applied.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    bs = batch_size or len(dataset)
    train = trainable_params(model, mask)
    frozen = {n: p for n, p in model.params.items() if n not in train}
    saved = {n: p.requires_grad for n, p in frozen.items()}
    opt = Adam(lr)
    history = []
    try:
        for p in frozen.values():
            p.requires_grad = False
        for p in train.values():
            p.requires_grad = True
        for step in range(steps):
            start = (step * bs) % len(dataset)
            batch = [dataset.examples[(start + j) % len(dataset)] for j in range(bs)]
            with Tape() as tape:
                total = None
                for ex in batch:
                    li = example_loss(model, dataset, ex)
                    total = li if total is None else total + li
                batch_loss = total * (1.0 / len(batch))
            history.append(batch_loss.item())
            if not train:
                continue
            backward(batch_loss, tape, list(train.values()))
            opt.step(train)
    finally:
        for n, p in frozen.items():
            p.requires_grad = saved[n]
    return history


def evaluate(model: FlashSloth, dataset: ToyDataset, max_new: int = 4) -> float:
    """Exact-match accuracy of greedy answers."""
    if len(dataset) == 0:
        return 0.0
    hits = 0
    for ex in dataset.examples:
        seq = model.sequence(dataset.image(ex), ex.instruction)
        ids = decode_greedy(seq, model.params, model.config, max_new)
        hits += detokenize(ids) == ex.answer
    return hits / len(dataset)


def write_loss_csv(losses, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
