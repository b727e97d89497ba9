"""Embedded query module.

At the hook layer the query-token hidden states first cross-attend to the
instruction's text states only, then use the result to attend over the
uncompressed visual tokens. The visual read-out is up-projected to the model
width and fused back into the query stream.

Both attention stages are single-head, scaled by ``1/sqrt(d_e)`` and carry
no bias terms. The text stage and the visual stage own separate projection
matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, matmul, mul, sigmoid, softmax, transpose
from .vision import DOT_ID

FUSIONS = ("add", "replace", "gate")
INIT_MODES = ("dot", "random", "fixed_dot")
CLOSED_GATE = -30.0  # sigmoid(-30) ~ 9e-14, used as the "-inf" gate in tests


@dataclass
class EmbQLayer:
    text_wq: Tensor  # d_model x d_e
    text_wk: Tensor  # d_model x d_e
    text_wv: Tensor  # d_model x d_e
    vis_wq: Tensor  # d_e x d_e
    vis_wk: Tensor  # d_vis x d_e
    vis_wv: Tensor  # d_vis x d_e
    up_proj: Tensor  # d_e x d_model
    gate_logits: Tensor | None = None  # d_model, gate fusion only

    @property
    def d_e(self) -> int:
        return self.text_wq.shape[1]

    def tensors(self) -> dict:
        out = {
            "text_wq": self.text_wq,
            "text_wk": self.text_wk,
            "text_wv": self.text_wv,
            "vis_wq": self.vis_wq,
            "vis_wk": self.vis_wk,
            "vis_wv": self.vis_wv,
            "up_proj": self.up_proj,
        }
        if self.gate_logits is not None:
            out["gate_logits"] = self.gate_logits
        return out


@dataclass
class EmbQParams:
    layers: list = field(default_factory=list)
    fusion: str = "add"

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ContractError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.fusion == "gate" and any(layer.gate_logits is None for layer in self.layers):
            raise ContractError("gate fusion needs gate_logits on every layer")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_e(self) -> int:
        return self.layers[0].d_e

    @classmethod
    def init(
        cls,
        d_model: int,
        d_vis: int,
        d_e: int,
        rng: np.random.Generator,
        n_layers: int = 1,
        fusion: str = "add",
    ) -> "EmbQParams":
        def w(fan_in, fan_out):
            return Tensor(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in), requires_grad=True)

        layers = []
        for _ in range(n_layers):
            layers.append(
                EmbQLayer(
                    text_wq=w(d_model, d_e),
                    text_wk=w(d_model, d_e),
                    text_wv=w(d_model, d_e),
                    vis_wq=w(d_e, d_e),
                    vis_wk=w(d_vis, d_e),
                    vis_wv=w(d_vis, d_e),
                    up_proj=w(d_e, d_model),
                    gate_logits=Tensor(np.zeros(d_model), requires_grad=True) if fusion == "gate" else None,
                )
            )
        return cls(layers, fusion)


@dataclass
class QuerySet:
    n: int
    embeddings: Tensor  # n x d_model
    init_mode: str = "dot"

    @property
    def trainable(self) -> bool:
        return self.init_mode != "fixed_dot"


def init_queries(
    n: int,
    embedding_table: Tensor,
    mode: str = "dot",
    rng: np.random.Generator | None = None,
    dot_id: int = DOT_ID,
) -> QuerySet:
    """Query embeddings copied from the '.' row, or seeded N(0, 0.02^2) for ``random``."""
    if n < 0:
        raise ContractError(f"query count must be >= 0, got {n}")
    if mode not in INIT_MODES:
        raise ContractError(f"unknown query init {mode!r}; expected one of {INIT_MODES}")
    d_model = embedding_table.shape[1]
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        data = 0.02 * rng.standard_normal((n, d_model))
    else:
        if not 0 <= dot_id < embedding_table.shape[0]:
            raise ContractError(f"embedding table has no row {dot_id} for the dot token")
        data = np.repeat(embedding_table.data[dot_id][None, :], n, axis=0)
    return QuerySet(n, Tensor(data, requires_grad=mode != "fixed_dot"), mode)


def cross_attention(q_src: Tensor, kv_src: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, return_weights: bool = False):
    d_e = wq.shape[1]
    q = matmul(q_src, wq)
    k = matmul(kv_src, wk)
    v = matmul(kv_src, wv)
    weights = softmax(matmul(q, transpose(k)) * (1.0 / np.sqrt(d_e)))
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def text_query(fq_k: Tensor, ft_k: Tensor, layer: EmbQLayer, return_weights: bool = False):
    """Queries read the instruction. Visual positions are never passed in."""
    if ft_k.ndim != 2 or ft_k.shape[0] == 0:
        raise ContractError("EmbQ needs a non-empty instruction (text segment)")
    if fq_k.shape[1] != layer.text_wq.shape[0] or ft_k.shape[1] != layer.text_wk.shape[0]:
        raise DimensionError(
            f"query/text widths {fq_k.shape[1]}/{ft_k.shape[1]} vs projection input {layer.text_wq.shape[0]}"
        )
    return cross_attention(fq_k, ft_k, layer.text_wq, layer.text_wk, layer.text_wv, return_weights)


def visual_query(ftq: Tensor, fv_raw: Tensor, layer: EmbQLayer, return_weights: bool = False):
    """Text-conditioned queries read the uncompressed encoder tokens."""
    if fv_raw.ndim != 2 or fv_raw.shape[0] == 0:
        raise ContractError("visual_query needs at least one visual token")
    if fv_raw.shape[1] != layer.vis_wk.shape[0]:
        raise DimensionError(f"visual width {fv_raw.shape[1]} vs projection input {layer.vis_wk.shape[0]}")
    return cross_attention(ftq, fv_raw, layer.vis_wq, layer.vis_wk, layer.vis_wv, return_weights)


def fuse(fq_k: Tensor, delta: Tensor, fusion: str, gate_logits: Tensor | None = None) -> Tensor:
    if fusion == "add":
        return fq_k + delta
    if fusion == "replace":
        return delta
    if fusion == "gate":
        return fq_k + mul(sigmoid(gate_logits), delta)
    raise ContractError(f"unknown fusion {fusion!r}")


def embq_apply(fq_k: Tensor, ft_k: Tensor, fv_raw: Tensor, params: EmbQParams) -> Tensor:
    if fq_k.shape[0] == 0:
        raise ContractError("embq_apply needs at least one query; n = 0 is a no-op upstream")
    out = fq_k
    for layer in params.layers:
        delta = matmul(visual_query(text_query(out, ft_k, layer), fv_raw, layer), layer.up_proj)
        out = fuse(out, delta, params.fusion, layer.gate_logits)
    return out
