"""Synthetic visual feature grids, HD tiling and the byte tokenizer.

The vision encoder is replaced by a seeded generator: i.i.d. standard normals
from ``numpy.random.default_rng(seed)`` (PCG64) on an ``(h+2) x (w+2) x d``
canvas, averaged with a 3x3 box filter (valid mode). Adjacent cells share six
of their nine source samples, so neighbours correlate at 2/3 the way encoder
patches carry overlapping content.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, concat, getitem, reshape, tsum

BOX_KERNEL = np.full((3, 3), 1.0 / 9.0)

DOT_ID = 46  # byte value of '.'; its embedding row seeds the query tokens
EOA_ID = 257  # end-of-answer
DOT_TOKEN_ID = 256  # reserved; never emitted by toy_tokenize
MIN_VOCAB = 258

GRID_MAGIC = b"VGRD"


@dataclass
class VisualGrid:
    h: int
    w: int
    d: int
    features: Tensor

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or self.d < 1:
            raise DimensionError(f"grid dims must be positive, got {self.h}x{self.w}x{self.d}")
        if self.features.shape != (self.h * self.w, self.d):
            raise DimensionError(
                f"features shape {self.features.shape} does not match grid {self.h}x{self.w}x{self.d}"
            )

    @classmethod
    def from_array(cls, arr, requires_grad: bool = False) -> "VisualGrid":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionError(f"expected an (h, w, d) array, got shape {arr.shape}")
        h, w, d = arr.shape
        return cls(h, w, d, Tensor(arr.reshape(h * w, d), requires_grad=requires_grad))

    @property
    def n_tokens(self) -> int:
        return self.h * self.w

    def to_array(self) -> np.ndarray:
        return self.features.data.reshape(self.h, self.w, self.d).copy()

    def cell(self, i: int, j: int) -> np.ndarray:
        return self.features.data[i * self.w + j]


@dataclass
class HdTileSet:
    tiles: list  # four quadrants, row-major: top-left, top-right, bottom-left, bottom-right
    thumbnail: VisualGrid

    def grids(self) -> list:
        """Thumbnail first, then the quadrants (the order the model consumes)."""
        return [self.thumbnail, *self.tiles]


def synth_features(seed: int, h: int, w: int, d: int) -> VisualGrid:
    if h < 1 or w < 1 or d < 1:
        raise DimensionError(f"grid dims must be positive, got {h}x{w}x{d}")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((h + 2, w + 2, d))
    out = np.zeros((h, w, d))
    for a in range(3):
        for b in range(3):
            out += BOX_KERNEL[a, b] * raw[a : a + h, b : b + w]
    return VisualGrid.from_array(out)


def hd_tile(full: VisualGrid) -> HdTileSet:
    """Split a 2h x 2w grid into four h x w quadrants plus a 2x2-mean thumbnail."""
    if full.h % 2 or full.w % 2:
        raise DimensionError(f"HD tiling needs even grid sides, got {full.h}x{full.w}")
    h, w, d = full.h // 2, full.w // 2, full.d
    rows = np.arange(full.h * full.w).reshape(full.h, full.w)
    tiles = []
    for r0 in (0, h):
        for c0 in (0, w):
            idx = rows[r0 : r0 + h, c0 : c0 + w].reshape(-1)
            tiles.append(VisualGrid(h, w, d, getitem(full.features, idx)))
    # gather the four members of each 2x2 block as consecutive rows, then average
    blocks = rows.reshape(h, 2, w, 2).transpose(0, 2, 1, 3).reshape(-1)
    pooled = tsum(reshape(getitem(full.features, blocks), (h * w, 4, d)), axis=1) * 0.25
    return HdTileSet(tiles, VisualGrid(h, w, d, pooled))


def reassemble(tiles: HdTileSet) -> VisualGrid:
    """Inverse of the quadrant split (the thumbnail is ignored)."""
    tl, tr, bl, br = tiles.tiles
    h, w, d = tl.h, tl.w, tl.d
    top = concat([reshape(tl.features, (h, w, d)), reshape(tr.features, (h, w, d))], axis=1)
    bottom = concat([reshape(bl.features, (h, w, d)), reshape(br.features, (h, w, d))], axis=1)
    full = concat([top, bottom], axis=0)
    return VisualGrid(2 * h, 2 * w, d, reshape(full, (4 * h * w, d)))


def toy_tokenize(text: str, vocab_size: int = MIN_VOCAB) -> list:
    """UTF-8 bytes as ids 0-255. ``'.'`` maps to 46, the row used to seed queries."""
    if vocab_size < MIN_VOCAB:
        raise ContractError(f"vocab_size must be at least {MIN_VOCAB}, got {vocab_size}")
    return list(text.encode("utf-8"))


def detokenize(ids) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def save_grid(grid: VisualGrid, path) -> None:
    header = GRID_MAGIC + struct.pack("<III", grid.h, grid.w, grid.d)
    Path(path).write_bytes(header + grid.features.data.astype("<f8").tobytes())


def load_grid(path) -> VisualGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != GRID_MAGIC:
        raise ContractError(f"{path}: not a VGRD file")
    h, w, d = struct.unpack("<III", raw[4:16])
    body = np.frombuffer(raw[16:], dtype="<f8")
    if body.size != h * w * d:
        raise ContractError(f"{path}: expected {h * w * d} values, found {body.size}")
    return VisualGrid(h, w, d, Tensor(body.reshape(h * w, d)))
