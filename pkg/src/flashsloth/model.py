"""Tiny decoder-only language model hosting the compressed visual stream.

Sequence layout per turn is ``visual | text | queries | answer`` (later turns
repeat ``text | queries | answer``). Blocks are pre-norm with single-matrix
Q/K/V/O projections, rotary position encoding, causal attention and a GELU
MLP. Immediately after block ``k`` the query positions of every turn are
rewritten by the embedded query module using that turn's text states and the
raw (pre-compression) visual tokens.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sap as sap_mod
from .embq import FUSIONS, INIT_MODES, EmbQLayer, EmbQParams, QuerySet, embq_apply, init_queries
from .errors import CapacityError, ConfigError, ContractError, DimensionError
from .tensor import (
    Tensor,
    concat,
    gelu,
    getitem,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)
from .vision import EOA_ID, MIN_VOCAB, HdTileSet, VisualGrid, hd_tile, toy_tokenize

ROPE_BASE = 10000.0
REFERENCE_DEPTH = 32  # depth of the reference LLM; ablation insertion layers are quoted against it

SEGMENTS = ("visual", "text", "query", "answer")


@dataclass
class ModelConfig:
    n_layers: int = 12
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    vocab_size: int = MIN_VOCAB
    d_vis: int = 64
    grid: int = 27
    s: int = 3
    compressor: str = "sap"
    sap_hidden: int | None = None
    n_queries: int = 9
    query_init: str = "dot"
    embq_layer: int | tuple = 8
    embq_dim: int = 576
    embq_n_layers: int = 1
    fusion: str = "add"
    hd: bool = False
    hd_embq_source: str = "all"
    max_seq: int = 2048
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.embq_layer, (list, tuple)):
            self.embq_layer = tuple(int(k) for k in self.embq_layer)
            if len(self.embq_layer) == 1:
                self.embq_layer = self.embq_layer[0]

    @property
    def hook_layers(self) -> tuple:
        ks = self.embq_layer if isinstance(self.embq_layer, tuple) else (self.embq_layer,)
        return tuple(sorted(set(ks)))

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_visual_tokens(self) -> int:
        per_grid = (self.grid // self.s) ** 2
        return 5 * per_grid if self.hd else per_grid

    def validate(self) -> "ModelConfig":
        positive = ("n_layers", "d_model", "n_heads", "d_ff", "d_vis", "grid", "s", "embq_dim", "embq_n_layers", "max_seq")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ConfigError(f"head width {self.d_head} must be even for rotary encoding")
        if self.vocab_size < MIN_VOCAB:
            raise ConfigError(f"vocab_size must be >= {MIN_VOCAB}, got {self.vocab_size}")
        if self.grid % self.s:
            raise ConfigError(f"grid {self.grid} is not divisible by s={self.s}")
        if self.n_queries < 0:
            raise ConfigError(f"n_queries must be >= 0, got {self.n_queries}")
        for k in self.hook_layers:
            if not 1 <= k <= self.n_layers:
                raise ConfigError(f"embq_layer {k} outside 1..{self.n_layers}")
        if self.compressor not in sap_mod.COMPRESSORS:
            raise ConfigError(f"compressor must be one of {sap_mod.COMPRESSORS}, got {self.compressor!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.query_init not in INIT_MODES:
            raise ConfigError(f"query_init must be one of {INIT_MODES}, got {self.query_init!r}")
        if self.hd_embq_source not in ("all", "thumbnail"):
            raise ConfigError(f"hd_embq_source must be 'all' or 'thumbnail', got {self.hd_embq_source!r}")
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = "/".join(str(k) for k in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            lines.append(f"{f.name}={v}")
        return "\n".join(sorted(lines)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            default = types[key].default
            if raw == "none":
                kw[key] = None
            elif key == "embq_layer":
                kw[key] = tuple(int(k) for k in raw.split("/"))
            elif isinstance(default, bool):
                kw[key] = raw == "true"
            elif isinstance(default, int) or key == "sap_hidden":
                kw[key] = int(raw)
            else:
                kw[key] = raw
        return cls(**kw)


def scaled_layer(reference_layer: int, n_layers: int) -> int:
    """Map an insertion depth quoted for the 32-layer reference onto a shallower stack."""
    return min(n_layers, max(1, round(reference_layer * n_layers / REFERENCE_DEPTH)))


# --------------------------------------------------------------------------
# parameters


def param_group(name: str) -> str:
    head = name.split(".", 1)[0]
    if head in ("embed", "blocks", "ln_f", "lm_head"):
        return "llm"
    if head in ("pixel_shuffle", "ldp"):
        return "compressor"
    return head  # projector, sap, queries, embq


def init_params(config: ModelConfig) -> dict:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, V, f = config.d_model, config.vocab_size, config.d_ff

    def normal(shape, std):
        return Tensor(std * rng.standard_normal(shape), requires_grad=True)

    p = {"embed": normal((V, d), 0.02)}
    for i in range(config.n_layers):
        pre = f"blocks.{i}."
        p[pre + "ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        p[pre + "ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
        for m in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + m] = normal((d, d), 1.0 / np.sqrt(d))
        p[pre + "ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        p[pre + "ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
        p[pre + "mlp.w1"] = normal((d, f), 1.0 / np.sqrt(d))
        p[pre + "mlp.b1"] = Tensor(np.zeros(f), requires_grad=True)
        p[pre + "mlp.w2"] = normal((f, d), 1.0 / np.sqrt(f))
        p[pre + "mlp.b2"] = Tensor(np.zeros(d), requires_grad=True)
    p["ln_f.g"] = Tensor(np.ones(d), requires_grad=True)
    p["ln_f.b"] = Tensor(np.zeros(d), requires_grad=True)
    p["lm_head"] = normal((d, V), 1.0 / np.sqrt(d))
    p["projector"] = normal((config.d_vis, d), 1.0 / np.sqrt(config.d_vis))

    comp = sap_mod.init_compressor(config.compressor, config.d_vis, config.s, rng, config.sap_hidden)
    for k, t in comp.items():
        p[f"{config.compressor}.{k}"] = t

    if config.n_queries > 0:
        qs = init_queries(config.n_queries, p["embed"], config.query_init, rng)
        p["queries"] = qs.embeddings
        for k in config.hook_layers:
            emb = EmbQParams.init(d, config.d_vis, config.embq_dim, rng, config.embq_n_layers, config.fusion)
            for j, layer in enumerate(emb.layers):
                for name, t in layer.tensors().items():
                    p[f"embq.{k}.{j}.{name}"] = t
    for name, t in p.items():
        t.name = name
    return p


def compressor_params(params: dict, config: ModelConfig) -> dict:
    pre = config.compressor + "."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def embq_params(params: dict, config: ModelConfig, layer: int) -> EmbQParams:
    layers = []
    for j in range(config.embq_n_layers):
        pre = f"embq.{layer}.{j}."
        layers.append(EmbQLayer(**{k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}))
    return EmbQParams(layers, config.fusion)


def query_set(params: dict, config: ModelConfig) -> QuerySet:
    if config.n_queries == 0:
        return QuerySet(0, Tensor(np.zeros((0, config.d_model))), config.query_init)
    return QuerySet(config.n_queries, params["queries"], config.query_init)


def count_params(params: dict) -> int:
    return int(sum(t.data.size for t in params.values()))


# --------------------------------------------------------------------------
# sequences


@dataclass
class Turn:
    text_ids: list
    answer_ids: list = field(default_factory=list)


@dataclass
class MixedSequence:
    visual: Tensor  # N x d_model, already projected
    turns: list
    queries: Tensor  # n x d_model (n may be 0)
    raw_visual: Tensor | None = None  # uncompressed encoder tokens for the query module

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    def segments(self) -> list:
        """``(tag, start, stop)`` spans in sequence order."""
        spans = [("visual", 0, self.visual.shape[0])]
        pos = spans[0][2]
        for turn in self.turns:
            for tag, n in (("text", len(turn.text_ids)), ("query", self.n_queries), ("answer", len(turn.answer_ids))):
                if n:
                    spans.append((tag, pos, pos + n))
                    pos += n
        return spans

    def tags(self) -> list:
        out = []
        for tag, a, b in self.segments():
            out.extend([tag] * (b - a))
        return out

    def turn_spans(self) -> list:
        """Per turn: ``(text_start, text_stop, query_start, query_stop, answer_start, answer_stop)``."""
        out = []
        pos = self.visual.shape[0]
        for turn in self.turns:
            t0 = pos
            q0 = t0 + len(turn.text_ids)
            a0 = q0 + self.n_queries
            a1 = a0 + len(turn.answer_ids)
            out.append((t0, q0, q0, a0, a0, a1))
            pos = a1
        return out

    def __len__(self) -> int:
        return self.visual.shape[0] + sum(len(t.text_ids) + self.n_queries + len(t.answer_ids) for t in self.turns)

    def with_answer(self, answer_ids) -> "MixedSequence":
        turns = list(self.turns)
        last = turns[-1]
        turns[-1] = Turn(list(last.text_ids), list(last.answer_ids) + list(answer_ids))
        return MixedSequence(self.visual, turns, self.queries, self.raw_visual)


def project_visual(fv_s: VisualGrid, proj: Tensor) -> Tensor:
    if proj.ndim != 2 or proj.shape[0] != fv_s.d:
        raise DimensionError(f"projector {proj.shape} does not accept {fv_s.d}-wide visual tokens")
    return matmul(fv_s.features, proj)


def build_sequence(
    visual: Tensor,
    text_ids,
    queries: QuerySet,
    answer_ids=None,
    raw_visual: Tensor | None = None,
    more_turns=(),
) -> MixedSequence:
    """Lay out ``visual | text | queries | answer``; ``more_turns`` appends ``(text_ids, answer_ids)`` blocks."""
    turns = [Turn(list(text_ids), list(answer_ids or []))]
    turns.extend(Turn(list(t), list(a or [])) for t, a in more_turns)
    return MixedSequence(visual, turns, queries.embeddings, raw_visual)


# --------------------------------------------------------------------------
# forward


def _rope_tables(positions: np.ndarray, d_head: int):
    half = d_head // 2
    inv_freq = ROPE_BASE ** (-np.arange(half) / half)
    ang = positions[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    return np.concatenate([cos, cos], axis=1), np.concatenate([sin, sin], axis=1)


def rope(x: Tensor, positions: np.ndarray) -> Tensor:
    """Rotate-half rotary encoding on ``(heads, L, d_head)``."""
    d_head = x.shape[-1]
    half = d_head // 2
    cos, sin = _rope_tables(positions, d_head)
    rotated = concat([-getitem(x, (Ellipsis, slice(half, None))), getitem(x, (Ellipsis, slice(0, half)))], axis=-1)
    return x * Tensor(cos) + rotated * Tensor(sin)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    L, d = x.shape
    return transpose(reshape(x, (L, n_heads, d // n_heads)), (1, 0, 2))


def _block(x: Tensor, params: dict, i: int, config: ModelConfig, positions: np.ndarray, past=None):
    pre = f"blocks.{i}."
    L, d = x.shape
    H = config.n_heads
    h = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
    q = rope(_split_heads(matmul(h, params[pre + "attn.wq"]), H), positions)
    k = rope(_split_heads(matmul(h, params[pre + "attn.wk"]), H), positions)
    v = _split_heads(matmul(h, params[pre + "attn.wv"]), H)
    n_past = 0
    if past is not None:
        n_past = past[0].shape[1]
        k = concat([Tensor(past[0]), k], axis=1)
        v = concat([Tensor(past[1]), v], axis=1)
    mask = np.arange(n_past + L)[None, :] <= (n_past + np.arange(L))[:, None]
    att = softmax(matmul(q, transpose(k)) * (1.0 / np.sqrt(config.d_head)), mask=mask)
    o = reshape(transpose(matmul(att, v), (1, 0, 2)), (L, d))
    x = x + matmul(o, params[pre + "attn.wo"])
    h2 = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
    ff = matmul(gelu(matmul(h2, params[pre + "mlp.w1"]) + params[pre + "mlp.b1"]), params[pre + "mlp.w2"])
    x = x + ff + params[pre + "mlp.b2"]
    return x, (k.data, v.data)


def _embed_sequence(seq: MixedSequence, params: dict) -> Tensor:
    parts = [seq.visual]
    embed = params["embed"]
    for turn in seq.turns:
        if turn.text_ids:
            parts.append(getitem(embed, np.asarray(turn.text_ids, dtype=np.intp)))
        if seq.n_queries:
            parts.append(seq.queries)
        if turn.answer_ids:
            parts.append(getitem(embed, np.asarray(turn.answer_ids, dtype=np.intp)))
    return concat(parts, axis=0)


def _apply_hook(x: Tensor, seq: MixedSequence, params: dict, config: ModelConfig, layer: int) -> Tensor:
    if seq.raw_visual is None:
        raise ContractError("the query hook needs the raw visual tokens on the sequence")
    emb = embq_params(params, config, layer)
    for t0, t1, q0, q1, _, _ in seq.turn_spans():
        fused = embq_apply(x[q0:q1], x[t0:t1], seq.raw_visual, emb)
        x = concat([x[:q0], fused, x[q1:]], axis=0)
    return x


def forward(
    seq: MixedSequence,
    params: dict,
    config: ModelConfig,
    return_cache: bool = False,
    hook: bool = True,
    trace: list | None = None,
):
    """Logits ``(len, vocab)`` for every position of ``seq``.

    ``trace``, when given, collects the hidden states after every block as
    ``(layer, stage, array)`` with stage ``"block"`` and, at hook layers,
    ``"hook"``.
    """
    n = len(seq)
    if n > config.max_seq:
        raise CapacityError(f"sequence of {n} positions exceeds max_seq={config.max_seq}")
    x = _embed_sequence(seq, params)
    positions = np.arange(n, dtype=np.float64)
    hooks = config.hook_layers if hook and seq.n_queries > 0 else ()
    cache = []
    for i in range(config.n_layers):
        x, kv = _block(x, params, i, config, positions)
        cache.append(kv)
        if trace is not None:
            trace.append((i + 1, "block", x.data.copy()))
        if i + 1 in hooks:
            x = _apply_hook(x, seq, params, config, i + 1)
            if trace is not None:
                trace.append((i + 1, "hook", x.data.copy()))
    logits = matmul(layer_norm(x, params["ln_f.g"], params["ln_f.b"]), params["lm_head"])
    return (logits, cache) if return_cache else logits


@dataclass
class DecodeState:
    cache: list  # per layer (keys, values), each (heads, positions, d_head)
    position: int

    def __post_init__(self):
        for k, v in self.cache:
            if k.shape[1] != self.position or v.shape[1] != self.position:
                raise ContractError("cache length must equal the number of consumed positions")


def decode_step(token: int, state: DecodeState, params: dict, config: ModelConfig):
    """Consume one token; returns ``(logits_row, new_state)``."""
    if state.position >= config.max_seq:
        raise CapacityError(f"decoding past max_seq={config.max_seq}")
    x = getitem(params["embed"], np.asarray([token], dtype=np.intp))
    positions = np.asarray([state.position], dtype=np.float64)
    new_cache = []
    for i in range(config.n_layers):
        x, kv = _block(x, params, i, config, positions, past=state.cache[i])
        new_cache.append(kv)
    logits = matmul(layer_norm(x, params["ln_f.g"], params["ln_f.b"]), params["lm_head"])
    return logits.data[0], DecodeState(new_cache, state.position + 1)


def decode_greedy(
    prompt: MixedSequence,
    params: dict,
    config: ModelConfig,
    max_new: int,
    use_cache: bool = True,
) -> list:
    """Argmax decoding until end-of-answer or ``max_new`` tokens.

    The query hook runs once, during prefill. With ``use_cache=False`` every
    step re-runs the full forward pass instead of the cached step.
    """
    if max_new <= 0:
        return []
    logits, cache = forward(prompt, params, config, return_cache=True)
    state = DecodeState(cache, len(prompt))
    row = logits.data[-1]
    out = []
    while True:
        nxt = int(np.argmax(row))
        if nxt == EOA_ID:
            break
        out.append(nxt)
        if len(out) >= max_new:
            break
        if use_cache:
            row, state = decode_step(nxt, state, params, config)
        else:
            full = prompt.with_answer(out)
            if len(full) > config.max_seq:
                raise CapacityError(f"decoding past max_seq={config.max_seq}")
            row = forward(full, params, config).data[-1]
    return out


# --------------------------------------------------------------------------
# convenience wrapper


class FlashSloth:
    """Config plus parameter dict, with the image-to-answer plumbing wired up."""

    def __init__(self, config: ModelConfig | None = None, params: dict | None = None):
        self.config = (config or ModelConfig()).validate()
        self.params = params if params is not None else init_params(self.config)

    def compress(self, grid: VisualGrid) -> VisualGrid:
        c = self.config
        return sap_mod.compress(grid, c.compressor, c.s, compressor_params(self.params, c))

    def encode(self, image: VisualGrid):
        """Projected compressed tokens and the raw tokens the query module reads."""
        c = self.config
        if not c.hd:
            return project_visual(self.compress(image), self.params["projector"]), image.features
        tiles: HdTileSet = hd_tile(image)
        grids = tiles.grids()
        visual = concat([project_visual(self.compress(g), self.params["projector"]) for g in grids], axis=0)
        if c.hd_embq_source == "thumbnail":
            raw = tiles.thumbnail.features
        else:
            raw = concat([g.features for g in grids], axis=0)
        return visual, raw

    def sequence(self, image: VisualGrid, text: str, answer: str | None = None, more_turns=()) -> MixedSequence:
        V = self.config.vocab_size
        visual, raw = self.encode(image)
        answer_ids = None if answer is None else toy_tokenize(answer, V) + [EOA_ID]
        extra = [(toy_tokenize(t, V), None if a is None else toy_tokenize(a, V) + [EOA_ID]) for t, a in more_turns]
        return build_sequence(visual, toy_tokenize(text, V), query_set(self.params, self.config), answer_ids, raw, extra)

    def logits(self, seq: MixedSequence, **kw):
        return forward(seq, self.params, self.config, **kw)

    def generate(self, image: VisualGrid, text: str, max_new: int = 16, use_cache: bool = True) -> list:
        return decode_greedy(self.sequence(image, text), self.params, self.config, max_new, use_cache)


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SLTH"


def save_checkpoint(path, config: ModelConfig, params: dict) -> None:
    """``SLTH`` | u32 len | config text | u32 count | per tensor: name, shape, little-endian f64 data."""
    text = config.to_text().encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name].data
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a SLTH checkpoint")
    off = 4

    def u32():
        nonlocal off
        (v,) = struct.unpack_from("<I", raw, off)
        off += 4
        return v

    n = u32()
    config = ModelConfig.from_text(raw[off : off + n].decode("utf-8"))
    off += n
    params = {}
    for _ in range(u32()):
        ln = u32()
        name = raw[off : off + ln].decode("utf-8")
        off += ln
        shape = tuple(u32() for _ in range(u32()))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        params[name] = Tensor(arr, requires_grad=True, name=name)
    if config.query_init == "fixed_dot" and "queries" in params:
        params["queries"].requires_grad = False
    return config, params
