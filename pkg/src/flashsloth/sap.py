"""Spatial attention pooling and the baseline compressors used in ablations.

Each ``s x s`` region of the encoder grid is scored token by token with a
two-layer MLP, the scores are softmax-normalised inside the region, and the
region collapses to the weighted sum of its features. Output cells keep the
encoder width ``d``; projection into the language model happens later.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, concat, gelu, getitem, mul, reshape, softmax, tsum
from .vision import VisualGrid

COMPRESSORS = ("sap", "avg_pool", "pixel_shuffle", "ldp")


@dataclass
class SapParams:
    w1: Tensor  # d x d_h
    b1: Tensor  # d_h
    w2: Tensor  # d_h x 1
    b2: Tensor  # 1
    s: int

    def __post_init__(self):
        if self.s < 1:
            raise ContractError(f"region side must be >= 1, got {self.s}")
        d, d_h = self.w1.shape
        if d_h < 1 or self.b1.shape != (d_h,) or self.w2.shape != (d_h, 1) or self.b2.shape != (1,):
            raise DimensionError(
                f"inconsistent SAP MLP shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, d: int, s: int, rng: np.random.Generator, hidden: int | None = None) -> "SapParams":
        d_h = hidden or d
        return cls(
            w1=Tensor(rng.standard_normal((d, d_h)) / np.sqrt(d), requires_grad=True),
            b1=Tensor(np.zeros(d_h), requires_grad=True),
            w2=Tensor(rng.standard_normal((d_h, 1)) / np.sqrt(d_h), requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True),
            s=s,
        )

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def _check_divisible(grid: VisualGrid, s: int) -> None:
    if s < 1:
        raise ContractError(f"region side must be >= 1, got {s}")
    if grid.h % s or grid.w % s:
        raise DimensionError(f"grid {grid.h}x{grid.w} is not divisible into {s}x{s} regions")


def region_index(h: int, w: int, s: int) -> np.ndarray:
    """Row indices of the grid reordered region by region.

    Regions are row-major over region coordinates; cells inside a region are
    row-major too, so rows ``r*s*s : (r+1)*s*s`` form region ``r``.
    """
    cells = np.arange(h * w).reshape(h // s, s, w // s, s)
    return cells.transpose(0, 2, 1, 3).reshape(-1)


def partition_regions(grid: VisualGrid, s: int) -> list:
    _check_divisible(grid, s)
    idx = region_index(grid.h, grid.w, s).reshape(-1, s * s)
    return [getitem(grid.features, block) for block in idx]


def _mlp_logits(x: Tensor, params: SapParams) -> Tensor:
    return gelu(x @ params.w1 + params.b1) @ params.w2 + params.b2


def region_weights(block: Tensor, params: SapParams) -> Tensor:
    if block.ndim != 2 or block.shape[1] != params.d:
        raise DimensionError(f"region block {block.shape} does not match SAP input width {params.d}")
    logits = reshape(_mlp_logits(block, params), (1, block.shape[0]))
    return reshape(softmax(logits), (block.shape[0],))


def _ordered(grid: VisualGrid, params: SapParams) -> Tensor:
    _check_divisible(grid, params.s)
    if grid.d != params.d:
        raise DimensionError(f"grid width {grid.d} does not match SAP input width {params.d}")
    return getitem(grid.features, region_index(grid.h, grid.w, params.s))


def sap_weights(grid: VisualGrid, params: SapParams) -> Tensor:
    """Attention weights for every region at once, shape ``(n_regions, s*s)``."""
    ordered = _ordered(grid, params)
    return softmax(reshape(_mlp_logits(ordered, params), (-1, params.s**2)))


def sap_forward(grid: VisualGrid, params: SapParams) -> VisualGrid:
    s2 = params.s**2
    ordered = _ordered(grid, params)
    alpha = softmax(reshape(_mlp_logits(ordered, params), (-1, s2)))
    n = alpha.shape[0]
    weighted = mul(reshape(ordered, (n, s2, grid.d)), reshape(alpha, (n, s2, 1)))
    return VisualGrid(grid.h // params.s, grid.w // params.s, grid.d, tsum(weighted, axis=1))


# --------------------------------------------------------------------------
# baselines


def avg_pool(grid: VisualGrid, s: int) -> VisualGrid:
    _check_divisible(grid, s)
    ordered = getitem(grid.features, region_index(grid.h, grid.w, s))
    pooled = tsum(reshape(ordered, (-1, s * s, grid.d)), axis=1) * (1.0 / (s * s))
    return VisualGrid(grid.h // s, grid.w // s, grid.d, pooled)


def pixel_shuffle(grid: VisualGrid, s: int, weight: Tensor) -> VisualGrid:
    """Space-to-depth: concatenate each region's features, map ``s*s*d -> d``."""
    _check_divisible(grid, s)
    if weight.shape != (s * s * grid.d, grid.d):
        raise DimensionError(f"pixel shuffle weight {weight.shape}, expected {(s * s * grid.d, grid.d)}")
    ordered = getitem(grid.features, region_index(grid.h, grid.w, s))
    stacked = reshape(ordered, (-1, s * s * grid.d))
    return VisualGrid(grid.h // s, grid.w // s, grid.d, stacked @ weight)


def ldp(grid: VisualGrid, s: int, depthwise: Tensor, pointwise: Tensor) -> VisualGrid:
    """Depthwise 3x3 convolution (zero padding) sampled at region centres, then pointwise linear.

    A reduced stand-in for MobileVLM's LDP-V2. Output cell ``(i, j)`` is the
    convolution evaluated at grid cell ``(i*s + s//2, j*s + s//2)``.
    """
    _check_divisible(grid, s)
    h, w, d = grid.h, grid.w, grid.d
    if depthwise.shape != (3, 3, d) or pointwise.shape != (d, d):
        raise DimensionError(f"ldp kernels {depthwise.shape}/{pointwise.shape} do not fit width {d}")
    # trailing zero row stands in for out-of-bounds taps
    padded = concat([grid.features, Tensor(np.zeros((1, d)))], axis=0)
    zero_row = h * w
    ci = np.arange(h // s) * s + s // 2
    cj = np.arange(w // s) * s + s // 2
    acc = None
    for a in range(3):
        for b in range(3):
            rr = ci[:, None] + a - 1
            cc = cj[None, :] + b - 1
            valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            idx = np.where(valid, rr * w + cc, zero_row).reshape(-1)
            term = mul(getitem(padded, idx), reshape(getitem(depthwise, (a, b)), (1, d)))
            acc = term if acc is None else acc + term
    return VisualGrid(h // s, w // s, d, acc @ pointwise)


def baseline_compress(grid: VisualGrid, kind: str, s: int, params: dict | None = None) -> VisualGrid:
    params = params or {}
    if kind == "avg_pool":
        return avg_pool(grid, s)
    if kind == "pixel_shuffle":
        return pixel_shuffle(grid, s, params["weight"])
    if kind == "ldp":
        return ldp(grid, s, params["depthwise"], params["pointwise"])
    raise ContractError(f"unknown baseline compressor {kind!r}")


def init_compressor(kind: str, d: int, s: int, rng: np.random.Generator, hidden: int | None = None) -> dict:
    """Fresh trainable tensors for compressor ``kind``, keyed by short name."""
    if kind == "sap":
        return SapParams.init(d, s, rng, hidden).tensors()
    if kind == "avg_pool":
        return {}
    if kind == "pixel_shuffle":
        w = rng.standard_normal((s * s * d, d)) / np.sqrt(s * s * d)
        return {"weight": Tensor(w, requires_grad=True)}
    if kind == "ldp":
        dw = np.zeros((3, 3, d))
        dw[1, 1] = 1.0
        dw += 0.1 * rng.standard_normal((3, 3, d))
        pw = np.eye(d) + rng.standard_normal((d, d)) / np.sqrt(d) * 0.1
        return {"depthwise": Tensor(dw, requires_grad=True), "pointwise": Tensor(pw, requires_grad=True)}
    raise ContractError(f"unknown compressor {kind!r}; expected one of {COMPRESSORS}")


def compress(grid: VisualGrid, kind: str, s: int, params: dict) -> VisualGrid:
    if kind == "sap":
        return sap_forward(grid, SapParams(params["w1"], params["b1"], params["w2"], params["b2"], s))
    return baseline_compress(grid, kind, s, params)
