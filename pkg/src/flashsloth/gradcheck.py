"""End-to-end gradient check of the full image-to-answer loss.

Analytic gradients from the tape are compared against central differences
on a subsample of each parameter tensor: the entries with the largest
analytic magnitude plus a seeded random draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FlashSloth, ModelConfig, param_group
from .tensor import Tape, backward, finite_diff_grad, max_relative_error
from .trainer import ToyDataset, example_loss

GRAD_TOL = 1e-4


def tiny_config(**changes) -> ModelConfig:
    """Two blocks at width 8, every trainable piece present."""
    base = ModelConfig(
        n_layers=2,
        d_model=8,
        n_heads=2,
        d_ff=16,
        d_vis=4,
        grid=6,
        s=3,
        n_queries=2,
        embq_layer=1,
        embq_dim=8,
        max_seq=256,
    )
    return base.replace(**changes).validate()


@dataclass
class GradReport:
    per_tensor: dict  # name -> max relative error over probed entries
    per_group: dict  # group -> max over its tensors
    probed: int

    @property
    def worst(self) -> float:
        return max(self.per_group.values(), default=0.0)

    def ok(self, tol: float = GRAD_TOL) -> bool:
        return self.worst <= tol


def _probe_indices(g: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    flat = np.abs(g.reshape(-1))
    if flat.size <= 2 * k:
        return np.arange(flat.size)
    top = np.argsort(-flat, kind="stable")[:k]
    rest = np.setdiff1d(np.arange(flat.size), top)
    return np.concatenate([top, rng.choice(rest, size=k, replace=False)])


def gradcheck(config: ModelConfig | None = None, seed: int = 0, entries: int = 6, h: float = 1e-5) -> GradReport:
    """Compare tape gradients with finite differences for every parameter tensor."""
    config = config or tiny_config()
    model = FlashSloth(config)
    data = ToyDataset.generate(seed, 1, config.grid * (2 if config.hd else 1), config.d_vis)
    ex = data.examples[0]
    params = [p for n, p in model.params.items() if not (n == "queries" and config.query_init == "fixed_dot")]

    with Tape() as tape:
        loss = example_loss(model, data, ex)
    backward(loss, tape, params)
    analytic = {n: p.grad.copy() for n, p in model.params.items() if p.grad is not None}

    rng = np.random.default_rng(seed)
    per_tensor, probed = {}, 0
    for name in sorted(analytic):
        p = model.params[name]
        idx = _probe_indices(analytic[name], entries, rng)
        numeric = finite_diff_grad(lambda _: example_loss(model, data, ex), p, h, indices=idx)
        per_tensor[name] = max_relative_error(analytic[name].reshape(-1)[idx], numeric)
        probed += idx.size

    per_group = {}
    for name, err in per_tensor.items():
        g = param_group(name)
        per_group[g] = max(per_group.get(g, 0.0), err)
    return GradReport(per_tensor, per_group, probed)
