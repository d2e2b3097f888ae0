"""Baseline training, gated pruning fine-tuning and structural head removal."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import numerics as nx
from .data import IGNORE, CorpusSplit, Segment, segment_batches, segment_count
from .errors import DataError, EquivalenceError, GateStateError, NumericError, ScheduleError
from .gating import STOCHASTIC, GateSet, deterministic_gates, gate_scale
from .model import AllAttentionLM, MemoryState, ModelConfig
from .optim import Optimizer, clip_grad_norm

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass
class PruneSchedule:
    total_steps: int
    lambda_target: float = 0.0
    lambda_warmup_steps: int = 0
    gate_freeze_step: int | None = None
    lr_peak: float = 1e-3
    lr_final: float = 1e-4
    lr_warmup_steps: int = 0

    @classmethod
    def from_fractions(
        cls,
        total_steps: int,
        lambda_target: float = 0.0,
        lambda_warmup_frac: float = 0.05,
        freeze_frac: float | None = 0.20,
        lr_peak: float = 1e-3,
        lr_final: float = 1e-4,
        lr_warmup_frac: float = 0.05,
    ) -> "PruneSchedule":
        """Scale step fractions to ``total_steps``; 0.05 and 0.20 of 80K steps are 4K and 16K."""
        return cls(
            total_steps=total_steps,
            lambda_target=lambda_target,
            lambda_warmup_steps=int(round(lambda_warmup_frac * total_steps)),
            gate_freeze_step=None if freeze_frac is None else int(round(freeze_frac * total_steps)),
            lr_peak=lr_peak,
            lr_final=lr_final,
            lr_warmup_steps=int(round(lr_warmup_frac * total_steps)),
        )

    def gates_trainable(self, t: int) -> bool:
        return self.gate_freeze_step is None or t < self.gate_freeze_step


def lr_at_step(t: int, schedule: PruneSchedule) -> float:
    """Linear warm-up to ``lr_peak``, then cosine decay to ``lr_final`` at ``total_steps``."""
    s = schedule
    if not 0 <= t <= s.total_steps:
        raise ScheduleError(f"step {t} outside [0, {s.total_steps}]")
    if t < s.lr_warmup_steps:
        return s.lr_peak * t / s.lr_warmup_steps
    span = s.total_steps - s.lr_warmup_steps
    if span <= 0:
        return s.lr_peak
    progress = (t - s.lr_warmup_steps) / span
    return s.lr_final + 0.5 * (s.lr_peak - s.lr_final) * (1.0 + math.cos(math.pi * progress))


def lambda_at_step(t: int, schedule: PruneSchedule) -> float:
    if t < 0:
        raise ScheduleError(f"negative step {t}")
    if schedule.lambda_warmup_steps <= 0:
        return schedule.lambda_target
    return schedule.lambda_target * min(t / schedule.lambda_warmup_steps, 1.0)


# -- prune masks and structural pruning ----------------------------------------


@dataclass
class PruneMask:
    """``pruned[l][i]`` is True when head ``i`` of layer ``l`` is removed."""

    pruned: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.pruned)

    @property
    def n_heads(self) -> int:
        return len(self.pruned[0]) if self.pruned else 0

    @property
    def n_pruned(self) -> int:
        return int(sum(int(p.sum()) for p in self.pruned))

    @property
    def sparsity(self) -> float:
        return self.n_pruned / (self.n_layers * self.n_heads)

    def kept(self) -> list[list[int]]:
        return [[int(i) for i in np.flatnonzero(~p)] for p in self.pruned]

    def heads_per_layer(self) -> list[int]:
        return [int((~p).sum()) for p in self.pruned]

    @classmethod
    def empty(cls, n_layers: int, n_heads: int) -> "PruneMask":
        return cls([np.zeros(n_heads, dtype=bool) for _ in range(n_layers)])


def extract_prune_mask(gates: GateSet) -> PruneMask:
    if gates.mode == STOCHASTIC:
        raise GateStateError("freeze or binarise the gates before extracting a prune mask")
    return PruneMask([deterministic_gates(p, gates.cfg) == 0 for p in gates.pi])


def layer_scales(mask: PruneMask, output_scaling: bool = True) -> list[float]:
    """Per-layer output scale to fold into the surviving ``W_O`` rows."""
    return [float(gate_scale((~p).astype(np.float64), output_scaling).data) for p in mask.pruned]


def apply_structural_prune(model: AllAttentionLM, mask: PruneMask, output_scaling: bool = True) -> AllAttentionLM:
    """Gate-free model holding only the surviving heads.

    The per-layer output scale of the deterministic gates is multiplied into
    the kept ``W_O`` rows, so the result needs no gating at inference. A
    layer that loses every head keeps its norms and passes its input through.
    """
    cfg = model.cfg
    if mask.n_layers != cfg.n_layers or mask.n_heads != cfg.n_heads:
        raise ValueError(f"mask {mask.n_layers}x{mask.n_heads} does not match model {cfg.n_layers}x{cfg.n_heads}")
    if cfg.heads_per_layer is not None:
        raise ValueError("model is already structurally pruned")
    scales = layer_scales(mask, output_scaling)
    arrays = {}
    for k, t in model.named_parameters().items():
        if not k.startswith("layers."):
            arrays[k] = t.data.copy()
    kept = mask.kept()
    for l, layer in enumerate(model.layers):
        if not kept[l]:
            log.warning("all heads of layer %d pruned; layer reduces to a residual identity", l)
        small = layer.head_slice(kept[l])
        small.w_o.data = small.w_o.data * np.asarray(scales[l], dtype=small.w_o.dtype)
        for k, t in small.named().items():
            arrays[f"layers.{l}.{k}"] = t.data
    new_cfg = ModelConfig.from_dict({**cfg.to_dict(), "heads_per_layer": mask.heads_per_layer()})
    pruned = AllAttentionLM(new_cfg, seed=0, dtype=model.dtype)
    pruned.load_arrays(arrays)
    return pruned


def as_dtype(model: AllAttentionLM, dtype) -> AllAttentionLM:
    out = AllAttentionLM(model.cfg, seed=0, dtype=dtype)
    out.load_arrays(model.state_arrays())
    return out


def prune_equivalence_error(
    gated: AllAttentionLM,
    gates: GateSet,
    pruned: AllAttentionLM,
    token_batches,
) -> float:
    """Largest relative logit difference between gated and pruned forwards.

    Each batch is a ``B x T`` token array; memory is carried across batches
    so the cached-segment path is compared as well.
    """
    mode = gates.mode
    if mode == STOCHASTIC:
        gates.set_mode("deterministic")
    try:
        worst = 0.0
        mem_a = mem_b = None
        for toks in token_batches:
            la, mem_a = gated.forward(toks, mem_a, gates=gates)
            lb, mem_b = pruned.forward(toks, mem_b)
            denom = max(float(np.abs(la.data).max()), 1e-30)
            worst = max(worst, float(np.abs(la.data - lb.data).max()) / denom)
        return worst
    finally:
        gates.set_mode(mode)


def verify_prune_equivalence(gated, gates, pruned, token_batches, rtol: float = 1e-6) -> float:
    err = prune_equivalence_error(gated, gates, pruned, token_batches)
    if not err <= rtol:
        raise EquivalenceError(f"pruned model deviates from gated model: relative error {err:.3e} > {rtol:.1e}")
    return err


# -- evaluation -------------------------------------------------------------------


def evaluate(
    model: AllAttentionLM,
    split: CorpusSplit | np.ndarray,
    gates: GateSet | None = None,
    lanes: int = 1,
    seg_len: int | None = None,
    max_segments: int | None = None,
    level: str = "char",
) -> dict:
    """Mean next-token NLL over ``split`` with memory carried across segments.

    Dropout is off and gates are binarised. Returns ``nll``, ``bpc`` or
    ``ppl`` (by ``level``) and the number of scored tokens.
    """
    ids = split.ids if isinstance(split, CorpusSplit) else np.asarray(split)
    if ids.size < 2:
        raise DataError("evaluation split is empty")
    seg_len = seg_len or model.cfg.seg_len
    lanes = max(1, min(lanes, ids.size // seg_len))
    if segment_count(ids.size, seg_len, lanes) == 0:
        raise DataError(f"split of {ids.size} tokens is shorter than one segment of {seg_len}")
    mode = gates.mode if gates is not None else None
    if gates is not None and mode == STOCHASTIC:
        gates.set_mode("deterministic")
    try:
        total, count = 0.0, 0
        mem = model.init_memory(lanes)
        for seg in segment_batches(ids, seg_len, lanes):
            if max_segments is not None and seg.index >= max_segments:
                break
            logits, mem = model.forward(seg.inputs, mem, gates=gates)
            n = int((seg.targets != IGNORE).sum())
            if n == 0:
                continue
            loss = nx.cross_entropy(logits, seg.targets, ignore_index=IGNORE)
            total += float(loss.data) * n
            count += n
    finally:
        if gates is not None:
            gates.set_mode(mode)
    nll = total / count
    out = {"nll": nll, "tokens": count}
    if level == "char":
        out["bpc"] = nll / LN2
    else:
        out["ppl"] = math.exp(nll)
    return out


# -- training -------------------------------------------------------------------


@dataclass
class TrainState:
    model: AllAttentionLM
    schedule: PruneSchedule
    optimizer: Optimizer
    rng: np.random.Generator
    gates: GateSet | None = None
    gate_optimizer: Optimizer | None = None
    step: int = 0
    memory: MemoryState | None = None
    grad_clip: float = 0.25
    gate_lr: float | None = None


def make_state(
    model: AllAttentionLM,
    schedule: PruneSchedule,
    seed: int,
    gates: GateSet | None = None,
    weight_decay: float = 0.0,
    gate_lr: float | None = None,
    grad_clip: float = 0.25,
) -> TrainState:
    named = model.named_parameters()
    # norms and relative biases are exempt from decay
    no_decay = [i for i, k in enumerate(named) if "norm" in k or "bias" in k]
    opt = Optimizer(list(named.values()), "lamb", weight_decay=weight_decay, no_decay=no_decay)
    gate_opt = Optimizer(gates.pi, "adam") if gates is not None else None
    return TrainState(
        model, schedule, opt, np.random.default_rng(seed), gates, gate_opt, grad_clip=grad_clip, gate_lr=gate_lr
    )


def train_step(state: TrainState, seg: Segment, training: bool = True) -> dict:
    """One forward/backward/update on a lane-aligned segment.

    Gates train (stochastically) until ``gate_freeze_step`` and are frozen to
    their deterministic values from then on.
    """
    s = state
    t = s.step
    lr = lr_at_step(min(t, s.schedule.total_steps), s.schedule)
    lam = lambda_at_step(t, s.schedule)
    gates = s.gates
    if gates is not None and gates.mode == STOCHASTIC and not s.schedule.gates_trainable(t):
        gates.freeze()
        log.info("step %d: gates frozen, hard sparsity %.4f", t, gates.hard_sparsity())
    if s.memory is None:
        s.memory = s.model.init_memory(seg.inputs.shape[0])

    s.model.zero_grad()
    logits, new_mem = s.model.forward(seg.inputs, s.memory, gates=gates, rng=s.rng, training=training)
    nll = nx.cross_entropy(logits, seg.targets, ignore_index=IGNORE)
    loss = nll
    sparsity_term = 0.0
    if gates is not None:
        for p in gates.pi:
            p.grad = None
        l0 = gates.loss()
        sparsity_term = float(l0.data)
        if gates.mode == STOCHASTIC:
            loss = nll + l0 * lam
    if not np.isfinite(loss.data):
        raise NumericError(
            f"non-finite loss at step {t}: nll={float(nll.data)!r}, lambda={lam}, lr={lr}, "
            f"sparsity_loss={sparsity_term}"
        )
    loss.backward()
    params = s.optimizer.params + (gates.pi if gates is not None and gates.mode == STOCHASTIC else [])
    grad_norm = clip_grad_norm(params, s.grad_clip)
    s.optimizer.step(lr)
    if gates is not None and gates.mode == STOCHASTIC:
        s.gate_optimizer.step(lr if s.gate_lr is None else s.gate_lr)
    s.memory = new_mem
    s.step += 1

    out = {
        "step": s.step,
        "nll": float(nll.data),
        "sparsity_loss": sparsity_term,
        "lambda": lam,
        "lr": lr,
        "grad_norm": grad_norm,
    }
    if gates is not None:
        out["expected_sparsity"] = gates.expected_sparsity()
        out["hard_sparsity"] = gates.hard_sparsity()
    return out


def lane_stream(split: CorpusSplit | np.ndarray, seg_len: int, lanes: int) -> Iterator[Segment]:
    """Endless pass over ``split``; the index restarts at 0 on each new epoch."""
    while True:
        yield from segment_batches(split, seg_len, lanes)


def run_training(
    state: TrainState,
    train: CorpusSplit | np.ndarray,
    steps: int,
    lanes: int,
    on_log: Callable[[dict], None] | None = None,
    log_interval: int = 50,
) -> list[dict]:
    """Run ``steps`` updates; memory resets whenever the lane stream wraps."""
    seg_len = state.model.cfg.seg_len
    stream = lane_stream(train, seg_len, lanes)
    trace = []
    for _ in range(steps):
        seg = next(stream)
        if seg.index == 0:
            state.memory = None
        m = train_step(state, seg)
        trace.append(m)
        if on_log is not None and (state.step % log_interval == 0 or state.step == steps):
            on_log(m)
    return trace
