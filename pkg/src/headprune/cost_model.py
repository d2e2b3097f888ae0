"""Closed-form parameter and MAC accounting under head pruning.

Counts exclude the token embedding and the output projection. A MAC is one
multiply-accumulate inside a matrix product; norms, softmax and residual
additions are not counted. All head-partitioned terms scale with the number
of surviving heads; the Transformer-XL feedforward block does not.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import GranularityError

ARCHES = ("allatt", "txl")


@dataclass(frozen=True)
class ArchSpec:
    arch: str = "allatt"
    d: int = 512
    n_heads: int = 8
    n_layers: int = 16
    seg_len: int = 192
    mem_len: int = 192
    n_persist: int = 2048
    d_ff: int = 2048

    def __post_init__(self):
        if self.arch not in ARCHES:
            raise ValueError(f"arch must be one of {ARCHES}, got {self.arch!r}")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def with_arch(self, arch: str) -> "ArchSpec":
        return ArchSpec(arch, self.d, self.n_heads, self.n_layers, self.seg_len, self.mem_len, self.n_persist, self.d_ff)


@dataclass
class CostReport:
    arch: str
    sparsity: float
    params: int
    macs: int
    dense_params: int
    dense_macs: int
    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def param_ratio(self) -> float:
        return self.params / self.dense_params

    @property
    def mac_ratio(self) -> float:
        return self.macs / self.dense_macs


def kept_heads(spec: ArchSpec, sparsity=0.0, heads_per_layer: Sequence[int] | None = None) -> list[int]:
    """Surviving heads per layer for a uniform ``sparsity`` or explicit counts.

    Only the total matters for the closed forms, so a global sparsity is
    spread over layers arbitrarily. Raises :class:`GranularityError` if
    ``sparsity`` is not a whole number of heads.
    """
    L, H = spec.n_layers, spec.n_heads
    if heads_per_layer is not None:
        hpl = [int(h) for h in heads_per_layer]
        if len(hpl) != L or any(h < 0 or h > H for h in hpl):
            raise ValueError(f"heads_per_layer {hpl} inconsistent with L={L}, H={H}")
        return hpl
    pruned = float(sparsity) * L * H
    k = int(round(pruned))
    if not 0.0 <= sparsity <= 1.0 or abs(pruned - k) > 1e-9 * max(1.0, pruned):
        lo = max(0, min(L * H, int(np.floor(pruned))))
        hi = max(0, min(L * H, int(np.ceil(pruned))))
        near = sorted({lo / (L * H), hi / (L * H)})
        raise GranularityError(
            f"sparsity {sparsity} is not a multiple of 1/{L * H}; nearest representable: {near}"
        )
    # prune layer by layer from the top; any placement gives the same totals
    out = [H] * L
    for l in range(L):
        take = min(H, k)
        out[l] -= take
        k -= take
    return out


def heads_for_percent(percent: float, n_layers: int, n_heads: int, decimals: int = 1) -> int:
    """Number of pruned heads whose sparsity prints as ``percent`` at ``decimals``."""
    total = n_layers * n_heads
    hits = [k for k in range(total + 1) if round(100.0 * k / total, decimals) == round(percent, decimals)]
    if not hits:
        raise GranularityError(f"no head count out of {total} prints as {percent}%")
    return hits[0]


# -- per-head / per-layer terms ------------------------------------------------


def _allatt_head_params(spec: ArchSpec) -> int:
    # W_Q, W_K, W_V, W_R columns and W_O rows (5 d x d_h) plus P_K, P_V (2 N x d_h)
    return 5 * spec.d * spec.d_head + 2 * spec.n_persist * spec.d_head


def _aux_params(spec: ArchSpec, kept: Sequence[int]) -> int:
    # per-head relative biases u, v; two norms per layer; final norm
    return sum(2 * spec.d_head * h for h in kept) + spec.n_layers * 4 * spec.d + 2 * spec.d


def _allatt_layer_macs(spec: ArchSpec) -> dict[str, int]:
    T, S, d, N = spec.seg_len, spec.mem_len, spec.d, spec.n_persist
    return {
        "q_proj": T * d * d,
        "kv_proj": 2 * (T + S) * d * d,
        "rel_proj": (T + S) * d * d,
        "out_proj": T * d * d,
        "attention": 2 * T * (T + S + N) * d,
    }


def _txl_layer_macs(spec: ArchSpec) -> tuple[dict[str, int], dict[str, int]]:
    T, S, d = spec.seg_len, spec.mem_len, spec.d
    heads = {
        "q_proj": T * d * d,
        "kv_proj": 2 * (T + S) * d * d,
        "rel_proj": (T + S) * d * d,
        "out_proj": T * d * d,
        "attention": 2 * T * (T + S) * d,
    }
    return heads, {"ff": 2 * T * d * spec.d_ff}


# -- public counts -----------------------------------------------------------


def allatt_params(
    spec: ArchSpec,
    sparsity=0.0,
    heads_per_layer: Sequence[int] | None = None,
    include_aux: bool = False,
) -> int:
    """Non-embedding parameters of the All-attention model.

    By default only the head-partitioned weights, ``kept/H * L * (5d^2 + 2Nd)``.
    ``include_aux`` adds the relative-position biases and layer norms, which
    makes the count equal to ``AllAttentionLM.count_params("non_embedding")``.
    """
    kept = kept_heads(spec, sparsity, heads_per_layer)
    total = sum(kept) * _allatt_head_params(spec)
    if include_aux:
        total += _aux_params(spec, kept)
    return total


def allatt_macs(spec: ArchSpec, sparsity=0.0, heads_per_layer: Sequence[int] | None = None) -> int:
    kept = kept_heads(spec, sparsity, heads_per_layer)
    per_layer = sum(_allatt_layer_macs(spec).values())
    return sum(h * per_layer // spec.n_heads for h in kept)


def txl_params(spec: ArchSpec, sparsity=0.0, heads_per_layer: Sequence[int] | None = None) -> int:
    kept = kept_heads(spec, sparsity, heads_per_layer)
    d, d_h = spec.d, spec.d_head
    return sum(h * 5 * d * d_h + 2 * d * spec.d_ff for h in kept)


def txl_macs(spec: ArchSpec, sparsity=0.0, heads_per_layer: Sequence[int] | None = None) -> int:
    kept = kept_heads(spec, sparsity, heads_per_layer)
    heads, ff = _txl_layer_macs(spec)
    mha = sum(heads.values())
    return sum(h * mha // spec.n_heads + ff["ff"] for h in kept)


def cost_report(spec: ArchSpec, sparsity=0.0, heads_per_layer: Sequence[int] | None = None) -> CostReport:
    kept = kept_heads(spec, sparsity, heads_per_layer)
    frac = Fraction(sum(kept), spec.total_heads)
    L, H = spec.n_layers, spec.n_heads
    if spec.arch == "allatt":
        params, dense_params = allatt_params(spec, heads_per_layer=kept), allatt_params(spec)
        macs, dense_macs = allatt_macs(spec, heads_per_layer=kept), allatt_macs(spec)
        layer = _allatt_layer_macs(spec)
        breakdown = {k: sum(h * v // H for h in kept) for k, v in layer.items()}
        breakdown["persistent_params"] = sum(kept) * 2 * spec.n_persist * spec.d_head
        breakdown["projection_params"] = sum(kept) * 5 * spec.d * spec.d_head
    else:
        params, dense_params = txl_params(spec, heads_per_layer=kept), txl_params(spec)
        macs, dense_macs = txl_macs(spec, heads_per_layer=kept), txl_macs(spec)
        heads, ff = _txl_layer_macs(spec)
        breakdown = {k: sum(h * v // H for h in kept) for k, v in heads.items()}
        breakdown["ff"] = L * ff["ff"]
        breakdown["ff_params"] = L * 2 * spec.d * spec.d_ff
        breakdown["projection_params"] = sum(kept) * 5 * spec.d * spec.d_head
    return CostReport(spec.arch, float(1 - frac), params, macs, dense_params, dense_macs, breakdown)


def _ratios(spec: ArchSpec, sparsity: float) -> tuple[float, float, float, float]:
    """(param_ratio, mac_ratio, params, macs) for a continuous sparsity."""
    keep = 1.0 - sparsity
    L = spec.n_layers
    if spec.arch == "allatt":
        dense_p = L * _allatt_head_params(spec) * spec.n_heads
        dense_m = L * sum(_allatt_layer_macs(spec).values())
        p, m = keep * dense_p, keep * dense_m
    else:
        heads, ff = _txl_layer_macs(spec)
        mha_p = L * 5 * spec.d * spec.d
        ff_p = L * 2 * spec.d * spec.d_ff
        mha_m, ff_m = L * sum(heads.values()), L * ff["ff"]
        dense_p, dense_m = mha_p + ff_p, mha_m + ff_m
        p, m = keep * mha_p + ff_p, keep * mha_m + ff_m
    return p / dense_p, m / dense_m, p, m


def sparsity_sweep(spec: ArchSpec, steps: int, arches: Iterable[str] | None = None) -> list[dict]:
    """Both ratios on an even grid ``0, 1/(steps-1), ..., 1`` for each architecture."""
    if steps < 2:
        raise ValueError("sweep needs at least 2 grid points")
    arches = list(arches) if arches is not None else [spec.arch]
    rows = []
    for s in np.linspace(0.0, 1.0, steps):
        s = round(float(s), 12)
        for arch in arches:
            pr, mr, p, m = _ratios(spec.with_arch(arch), s)
            rows.append(
                {"sparsity": s, "arch": arch, "param_ratio": pr, "mac_ratio": mr, "params": int(round(p)), "macs": int(round(m))}
            )
    return rows


CSV_FIELDS = ("sparsity", "arch", "param_ratio", "mac_ratio", "params", "macs")


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "sparsity": f"{r['sparsity']:.6g}", "param_ratio": f"{r['param_ratio']:.6f}", "mac_ratio": f"{r['mac_ratio']:.6f}"})
    return buf.getvalue()
