"""Hard-concrete head gates, the expected-L0 penalty and the output scale.

Each layer owns a length-H vector of gate logits. During pruning the gates
are sampled once per forward pass per layer with the reparameterised
stretched binary-concrete; after the freeze step they are binarised without
noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import GateStateError
from .numerics import Tensor

STOCHASTIC = "stochastic"
DETERMINISTIC = "deterministic"
FROZEN = "frozen"
MODES = (STOCHASTIC, DETERMINISTIC, FROZEN)


@dataclass(frozen=True)
class HardConcreteConfig:
    beta: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1

    def __post_init__(self):
        if not (self.gamma < 0.0 < 1.0 < self.zeta):
            raise ValueError(f"need gamma < 0 < 1 < zeta, got gamma={self.gamma}, zeta={self.zeta}")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")

    @property
    def l0_shift(self) -> float:
        """``beta * log(-gamma / zeta)``; P(gate > 0) = sigmoid(pi - l0_shift)."""
        return self.beta * math.log(-self.gamma / self.zeta)


def _as_param(pi) -> Tensor:
    return pi if isinstance(pi, Tensor) else Tensor(np.asarray(pi, dtype=np.float64))


def sample_gates(pi, cfg: HardConcreteConfig, rng: np.random.Generator) -> Tensor:
    pi = _as_param(pi)
    # open interval keeps both logs finite
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=pi.shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12).astype(pi.dtype)
    noise = np.log(u) - np.log1p(-u)
    s = nx.sigmoid((pi + noise) * (1.0 / cfg.beta))
    stretched = s * (cfg.zeta - cfg.gamma) + cfg.gamma
    return nx.clip(stretched, 0.0, 1.0)


def expected_open(pi, cfg: HardConcreteConfig) -> Tensor:
    """Per-gate probability that the stretched gate is strictly positive."""
    return nx.sigmoid(_as_param(pi) - cfg.l0_shift)


def expected_l0(pi, cfg: HardConcreteConfig) -> Tensor:
    return nx.tsum(expected_open(pi, cfg))


def noise_free_gate(pi, cfg: HardConcreteConfig) -> np.ndarray:
    pi = np.asarray(pi.data if isinstance(pi, Tensor) else pi, dtype=np.float64)
    s = nx._sigmoid(pi / cfg.beta)
    return np.clip(s * (cfg.zeta - cfg.gamma) + cfg.gamma, 0.0, 1.0)


def deterministic_gates(pi, cfg: HardConcreteConfig) -> np.ndarray:
    return (noise_free_gate(pi, cfg) > 0.5).astype(np.float64)


def gate_scale(g, enabled: bool = True) -> Tensor:
    """Output scale ``min(H / sum(g), H)``; ``H`` when every gate is shut.

    With ``enabled=False`` (the no-output-scaling ablation) the scale is 1.
    """
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
    n = g.shape[-1]
    if not enabled:
        return Tensor(np.asarray(1.0, dtype=g.dtype))
    total = nx.tsum(g)
    if total.data <= 1.0:
        # H / total >= H here, so the clip is active and the gradient vanishes
        return Tensor(np.asarray(float(n), dtype=g.dtype))
    return nx.clip(float(n) / total, None, float(n))


def sparsity_loss(pis: Sequence, cfg: HardConcreteConfig) -> Tensor:
    """Unnormalised sum of expected open gates over every layer."""
    terms = [expected_l0(pi, cfg) for pi in pis]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


class GateSet:
    """Per-layer gate logits plus the current sampling mode.

    ``values(rng)`` returns one gate vector per layer for a single forward
    pass. In stochastic mode the vectors are differentiable samples; in the
    deterministic and frozen modes they are constant 0/1 arrays.
    """

    def __init__(
        self,
        n_layers: int,
        n_heads: int,
        init: float = 2.0,
        cfg: HardConcreteConfig | None = None,
        mode: str = STOCHASTIC,
        output_scaling: bool = True,
        dtype=np.float64,
    ):
        self.cfg = cfg or HardConcreteConfig()
        self.pi = [
            Tensor(np.full(n_heads, init, dtype=dtype), requires_grad=True, name=f"gates.layer{l}")
            for l in range(n_layers)
        ]
        self.output_scaling = output_scaling
        self.last_sample: list[np.ndarray] = []
        self.set_mode(mode)

    @property
    def n_layers(self) -> int:
        return len(self.pi)

    @property
    def n_heads(self) -> int:
        return self.pi[0].shape[0] if self.pi else 0

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown gate mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        trainable = mode == STOCHASTIC
        for p in self.pi:
            p.requires_grad = trainable
            if not trainable:
                p.grad = None

    def freeze(self) -> None:
        self.set_mode(FROZEN)

    def values(self, rng: np.random.Generator | None = None) -> list[Tensor]:
        if self.mode == STOCHASTIC:
            if rng is None:
                raise GateStateError("stochastic gates need an rng")
            out = [sample_gates(p, self.cfg, rng) for p in self.pi]
        else:
            out = [Tensor(deterministic_gates(p, self.cfg).astype(p.dtype)) for p in self.pi]
        self.last_sample = [g.data.copy() for g in out]
        return out

    def hard(self) -> list[np.ndarray]:
        return [deterministic_gates(p, self.cfg) for p in self.pi]

    def expected_sparsity(self) -> float:
        opened = sum(float(expected_l0(p.data, self.cfg).data) for p in self.pi)
        return 1.0 - opened / (self.n_layers * self.n_heads)

    def hard_sparsity(self) -> float:
        closed = sum(int((g == 0).sum()) for g in self.hard())
        return closed / (self.n_layers * self.n_heads)

    def loss(self) -> Tensor:
        return sparsity_loss(self.pi, self.cfg)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"gates.layer{l}": p.data for l, p in enumerate(self.pi)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], **kwargs) -> "GateSet":
        n_layers = sum(1 for k in arrays if k.startswith("gates.layer"))
        first = arrays["gates.layer0"]
        gs = cls(n_layers, first.shape[0], dtype=first.dtype, **kwargs)
        for l in range(n_layers):
            gs.pi[l].data = np.array(arrays[f"gates.layer{l}"], copy=True)
        return gs
