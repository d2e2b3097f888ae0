"""All-attention Transformer language model with segment memory.

Each layer is a single pre-norm attention block whose keys and values are
extended by per-head persistent vectors, which take the place of the
feedforward sublayer. Keys and values also cover the cached hidden states of
the previous segment, and content scores are complemented by Transformer-XL
relative-position scores (persistent slots get no positional term).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .gating import gate_scale
from .numerics import Tensor

HEAD_PARAMS = ("w_q", "w_k", "w_v", "w_r", "w_o", "p_k", "p_v")


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 8
    n_persist: int = 64
    n_layers: int = 2
    seg_len: int = 32
    mem_len: int | None = None
    vocab_size: int = 28
    dropout_attn: float = 0.2
    dropout_hidden: float = 0.1
    init_std: float = 0.02
    # surviving heads per layer after structural pruning; None means all
    heads_per_layer: list[int] | None = None

    def __post_init__(self):
        if self.mem_len is None:
            self.mem_len = self.seg_len
        for name in ("d", "n_heads", "n_layers", "seg_len", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_persist < 0 or self.mem_len < 0:
            raise ValueError("n_persist and mem_len must be non-negative")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.heads_per_layer is not None:
            hpl = [int(h) for h in self.heads_per_layer]
            if len(hpl) != self.n_layers or any(h < 0 or h > self.n_heads for h in hpl):
                raise ValueError(f"heads_per_layer {hpl} inconsistent with L={self.n_layers}, H={self.n_heads}")
            self.heads_per_layer = hpl

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    def layer_heads(self, layer: int) -> int:
        return self.n_heads if self.heads_per_layer is None else self.heads_per_layer[layer]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_r: Tensor
    w_o: Tensor
    p_k: Tensor
    p_v: Tensor
    bias_u: Tensor
    bias_v: Tensor
    q_norm_gain: Tensor
    q_norm_bias: Tensor
    kv_norm_gain: Tensor
    kv_norm_bias: Tensor

    @property
    def n_heads(self) -> int:
        return self.p_k.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def head_slice(self, heads: Sequence[int]) -> "LayerParams":
        """A view restricted to ``heads`` (new tensors, copied data)."""
        heads = list(heads)
        d_h = self.p_k.shape[2] if self.n_heads else 0
        cols = np.concatenate([np.arange(i * d_h, (i + 1) * d_h) for i in heads]) if heads else np.zeros(0, int)

        def leaf(a):
            return Tensor(np.array(a, copy=True), requires_grad=True)

        return LayerParams(
            w_q=leaf(self.w_q.data[:, cols]),
            w_k=leaf(self.w_k.data[:, cols]),
            w_v=leaf(self.w_v.data[:, cols]),
            w_r=leaf(self.w_r.data[:, cols]),
            w_o=leaf(self.w_o.data[cols, :]),
            p_k=leaf(self.p_k.data[heads]),
            p_v=leaf(self.p_v.data[heads]),
            bias_u=leaf(self.bias_u.data[heads]),
            bias_v=leaf(self.bias_v.data[heads]),
            q_norm_gain=leaf(self.q_norm_gain.data),
            q_norm_bias=leaf(self.q_norm_bias.data),
            kv_norm_gain=leaf(self.kv_norm_gain.data),
            kv_norm_bias=leaf(self.kv_norm_bias.data),
        )


@dataclass
class MemoryState:
    """Per-layer cached layer inputs (``B x S x d``), detached from any graph.

    Rows are zero until filled; ``valid`` counts the trailing rows that hold
    real hidden states and the rest are masked out of attention.
    """

    hiddens: list[np.ndarray]
    valid: int = 0

    @classmethod
    def zeros(cls, cfg: ModelConfig, batch: int, dtype=np.float64) -> "MemoryState":
        return cls([np.zeros((batch, cfg.mem_len, cfg.d), dtype=dtype) for _ in range(cfg.n_layers)], 0)

    def updated(self, layer_inputs: list[np.ndarray], mem_len: int) -> "MemoryState":
        new = []
        for old, x in zip(self.hiddens, layer_inputs):
            cat = np.concatenate([old, x], axis=1)
            new.append(np.ascontiguousarray(cat[:, cat.shape[1] - mem_len :]))
        seg = layer_inputs[0].shape[1] if layer_inputs else 0
        return MemoryState(new, min(self.valid + seg, mem_len))


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


@lru_cache(maxsize=32)
def _sinusoid(n_pos: int, d: int, dtype_name: str) -> np.ndarray:
    """Position encodings for distances ``n_pos-1, ..., 1, 0`` (descending)."""
    dist = np.arange(n_pos - 1, -1, -1, dtype=np.float64)
    inv = 1.0 / (10000 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    ang = dist[:, None] * inv[None, :]
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, :d]
    enc.setflags(write=False)
    return enc.astype(dtype_name)


@lru_cache(maxsize=64)
def attention_mask(seg: int, mem: int, n_persist: int, valid: int, dtype_name: str) -> np.ndarray:
    """Additive mask of shape ``T x (S + T + N)`` over ``[memory, segment, persistent]``.

    Query ``t`` may see key ``j`` iff ``S - valid <= j <= t + S``; persistent
    columns are always visible.
    """
    t = np.arange(seg)[:, None]
    j = np.arange(mem + seg)[None, :]
    blocked = (j > t + mem) | (j < mem - valid)
    mask = np.where(blocked, nx.MASK_VALUE, 0.0)
    mask = np.concatenate([mask, np.zeros((seg, n_persist))], axis=1).astype(dtype_name)
    mask.setflags(write=False)
    return mask


def attention_heads(
    x: Tensor,
    mem: np.ndarray,
    layer: LayerParams,
    valid: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_attn: float = 0.0,
) -> Tensor:
    """Per-head outputs ``B x h x T x d_h`` for all heads of ``layer``."""
    if x.ndim != 3:
        raise DimensionError(f"expected x of shape B x T x d, got {x.shape}")
    bsz, seg, d = x.shape
    h = layer.n_heads
    d_h = layer.p_k.shape[2]
    n_persist = layer.p_k.shape[1]
    mem_len = mem.shape[1]
    if mem.shape[0] != bsz or mem.shape[2] != d:
        raise DimensionError(f"memory shape {mem.shape} does not match input {x.shape}")
    klen = mem_len + seg

    hq = nx.layernorm(x, layer.q_norm_gain, layer.q_norm_bias)
    cat = nx.concat([Tensor(mem), x], axis=1) if mem_len else x
    hkv = nx.layernorm(cat, layer.kv_norm_gain, layer.kv_norm_bias)

    q = (hq @ layer.w_q).reshape(bsz, seg, h, d_h).transpose(0, 2, 1, 3)
    k = (hkv @ layer.w_k).reshape(bsz, klen, h, d_h).transpose(0, 2, 1, 3)
    v = (hkv @ layer.w_v).reshape(bsz, klen, h, d_h).transpose(0, 2, 1, 3)
    pos = Tensor(_sinusoid(klen, d, x.dtype.name))
    r = (pos @ layer.w_r).reshape(klen, h, d_h).transpose(1, 0, 2)

    content = (q + layer.bias_u.reshape(h, 1, d_h)) @ nx.swap_last(k)
    position = nx.rel_shift((q + layer.bias_v.reshape(h, 1, d_h)) @ nx.swap_last(r))
    scores = content + position
    if n_persist:
        scores = nx.concat([scores, q @ nx.swap_last(layer.p_k)], axis=-1)
    scores = scores * (1.0 / math.sqrt(d_h))
    scores = scores + attention_mask(seg, mem_len, n_persist, valid, x.dtype.name)
    probs = nx.softmax_lastdim(scores)
    probs = nx.dropout(probs, dropout_attn, rng, training)
    if n_persist:
        return probs[..., :klen] @ v + probs[..., klen:] @ layer.p_v
    return probs @ v


def head_attention(
    x: Tensor,
    mem: np.ndarray,
    layer: LayerParams,
    head: int,
    valid: int | None = None,
) -> Tensor:
    """Output ``T x d_h`` (or ``B x T x d_h``) of a single head, no dropout."""
    if not 0 <= head < layer.n_heads:
        raise DimensionError(f"head {head} out of range for {layer.n_heads} heads")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
        mem = mem[None]
    valid = mem.shape[1] if valid is None else valid
    single = LayerParams(**{k: _head_view(k, t, head, layer) for k, t in layer.named().items()})
    out = attention_heads(x, mem, single, valid)[:, 0]
    return out[0] if squeeze else out


def _head_view(name: str, t: Tensor, head: int, layer: LayerParams) -> Tensor:
    d_h = layer.p_k.shape[2]
    sl = slice(head * d_h, (head + 1) * d_h)
    if name in ("w_q", "w_k", "w_v", "w_r"):
        return t[:, sl]
    if name == "w_o":
        return t[sl, :]
    if name in ("p_k", "p_v", "bias_u", "bias_v"):
        return t[head : head + 1]
    return t


def layer_forward(
    x: Tensor,
    mem: np.ndarray,
    layer: LayerParams,
    gate: Tensor | None = None,
    output_scaling: bool = True,
    valid: int | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_attn: float = 0.0,
    dropout_hidden: float = 0.0,
) -> Tensor:
    """Pre-norm residual block: ``x + s_g * sum_i g_i h_i W_i^O``.

    Without ``gate`` this is the plain concatenate-and-project output.
    """
    if layer.n_heads == 0:
        return x
    valid = mem.shape[1] if valid is None else valid
    heads = attention_heads(x, mem, layer, valid, training, rng, dropout_attn)
    bsz, h, seg, d_h = heads.shape
    if gate is not None:
        heads = heads * gate.reshape(h, 1, 1)
    out = heads.transpose(0, 2, 1, 3).reshape(bsz, seg, h * d_h) @ layer.w_o
    if gate is not None:
        out = out * gate_scale(gate, output_scaling)
    out = nx.dropout(out, dropout_hidden, rng, training)
    return x + out


class AllAttentionLM:
    def __init__(self, cfg: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        std = cfg.init_std
        d, d_h, n = cfg.d, cfg.d_head, cfg.n_persist

        def normal(*shape):
            return Tensor(truncated_normal(rng, shape, std, self.dtype), requires_grad=True)

        def const(value, *shape):
            return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)

        self.embed = normal(cfg.vocab_size, d)
        self.layers: list[LayerParams] = []
        for l in range(cfg.n_layers):
            h = cfg.layer_heads(l)
            self.layers.append(
                LayerParams(
                    w_q=normal(d, h * d_h),
                    w_k=normal(d, h * d_h),
                    w_v=normal(d, h * d_h),
                    w_r=normal(d, h * d_h),
                    w_o=normal(h * d_h, d),
                    p_k=normal(h, n, d_h),
                    p_v=normal(h, n, d_h),
                    bias_u=const(0.0, h, d_h),
                    bias_v=const(0.0, h, d_h),
                    q_norm_gain=const(1.0, d),
                    q_norm_bias=const(0.0, d),
                    kv_norm_gain=const(1.0, d),
                    kv_norm_bias=const(0.0, d),
                )
            )
        self.final_norm_gain = const(1.0, d)
        self.final_norm_bias = const(0.0, d)
        self.out_proj = normal(cfg.vocab_size, d)

    # -- parameters ------------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for l, layer in enumerate(self.layers):
            for k, t in layer.named().items():
                out[f"layers.{l}.{k}"] = t
        out["final_norm.gain"] = self.final_norm_gain
        out["final_norm.bias"] = self.final_norm_bias
        out["out_proj"] = self.out_proj
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def count_params(self, part: str = "non_embedding") -> int:
        """Parameter count.

        ``part`` is ``"all"``, ``"non_embedding"`` (everything except the
        token embedding and output projection) or ``"heads"`` (only the
        head-partitioned projections and persistent vectors).
        """
        named = self.named_parameters()
        if part == "all":
            keys = named
        elif part == "non_embedding":
            keys = [k for k in named if k not in ("embed", "out_proj")]
        elif part == "heads":
            keys = [k for k in named if k.rsplit(".", 1)[-1] in HEAD_PARAMS]
        else:
            raise ValueError(f"unknown parameter group {part!r}")
        return int(sum(named[k].data.size for k in keys))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.named_parameters().items():
            if k not in arrays:
                raise KeyError(f"checkpoint is missing tensor {k!r}")
            a = arrays[k]
            if a.shape != t.shape:
                raise DimensionError(f"tensor {k!r}: checkpoint shape {a.shape} != model shape {t.shape}")
            t.data = np.array(a, dtype=self.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def init_memory(self, batch: int) -> MemoryState:
        return MemoryState.zeros(self.cfg, batch, self.dtype)

    # -- forward -----------------------------------------------------------------
    def forward(
        self,
        tokens,
        memory: MemoryState | None = None,
        gates=None,
        rng: np.random.Generator | None = None,
        training: bool = False,
        gate_values: list[Tensor] | None = None,
    ) -> tuple[Tensor, MemoryState]:
        """Logits for ``tokens`` (``T`` or ``B x T``) and the advanced memory.

        ``gates`` is a :class:`~headprune.gating.GateSet`; its values are drawn
        once for this pass. ``gate_values`` overrides the draw.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        bsz = tokens.shape[0]
        if memory is None:
            memory = self.init_memory(bsz)
        if gate_values is None and gates is not None:
            gate_values = gates.values(rng)
        output_scaling = True if gates is None else gates.output_scaling

        x = nx.embedding(self.embed, tokens)
        x = nx.dropout(x, cfg.dropout_hidden, rng, training)
        layer_inputs = []
        for l, layer in enumerate(self.layers):
            layer_inputs.append(x.data)
            x = layer_forward(
                x,
                memory.hiddens[l],
                layer,
                gate=None if gate_values is None else gate_values[l],
                output_scaling=output_scaling,
                valid=memory.valid,
                training=training,
                rng=rng,
                dropout_attn=cfg.dropout_attn,
                dropout_hidden=cfg.dropout_hidden,
            )
        x = nx.layernorm(x, self.final_norm_gain, self.final_norm_bias)
        logits = x @ nx.swap_last(self.out_proj)
        new_memory = memory.updated(layer_inputs, cfg.mem_len)
        if squeeze:
            logits = logits[0]
        return logits, new_memory

    __call__ = forward
