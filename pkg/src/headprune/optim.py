"""LAMB and Adam over lists of :class:`~headprune.numerics.Tensor` leaves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor

TRUST_CLIP = (0.01, 10.0)


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, p: np.ndarray) -> "MomentState":
        return cls(np.zeros_like(p), np.zeros_like(p), 0)


def adam_direction(grad, state: MomentState, betas=(0.9, 0.999), eps=1e-6) -> np.ndarray:
    """Advance the moments in place and return the bias-corrected Adam step."""
    b1, b2 = betas
    state.step += 1
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    return m_hat / (np.sqrt(v_hat) + eps)


def lamb_update(
    param: np.ndarray,
    grad: np.ndarray,
    state: MomentState,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-6,
    weight_decay: float = 0.0,
    trust_ratio: float | None = None,
) -> np.ndarray:
    """One LAMB step; returns the new parameter value.

    The Adam direction (plus decoupled decay) is rescaled by
    ``||param|| / ||direction||`` clamped to ``TRUST_CLIP``. Passing
    ``trust_ratio`` overrides the computed ratio, e.g. ``1.0`` gives AdamW.
    """
    step = adam_direction(grad, state, betas, eps)
    if weight_decay:
        step = step + weight_decay * param
    if trust_ratio is None:
        w_norm = float(np.linalg.norm(param))
        s_norm = float(np.linalg.norm(step))
        if w_norm == 0.0 or s_norm == 0.0:
            trust_ratio = 1.0
        else:
            trust_ratio = float(np.clip(w_norm / s_norm, *TRUST_CLIP))
    return param - lr * trust_ratio * step


class Optimizer:
    """LAMB (``variant="lamb"``) or Adam over a fixed list of parameters.

    ``no_decay`` holds indices of parameters exempt from weight decay.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        variant: str = "lamb",
        betas=(0.9, 0.999),
        eps: float = 1e-6,
        weight_decay: float = 0.0,
        no_decay: Sequence[int] = (),
    ):
        if variant not in ("lamb", "adam"):
            raise ValueError(f"unknown optimizer variant {variant!r}")
        self.params = list(params)
        self.variant = variant
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.state = [MomentState.like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for i, (p, st) in enumerate(zip(self.params, self.state)):
            if p.grad is None:
                continue
            wd = 0.0 if i in self.no_decay else self.weight_decay
            tr = None if self.variant == "lamb" else 1.0
            p.data = lamb_update(p.data, p.grad, st, lr, self.betas, self.eps, wd, trust_ratio=tr).astype(
                p.data.dtype, copy=False
            )

    def state_arrays(self, prefix: str = "opt") -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.state):
            out[f"{prefix}.{i}.m"] = st.m
            out[f"{prefix}.{i}.v"] = st.v
            out[f"{prefix}.{i}.step"] = np.asarray([st.step], dtype=np.float64)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "opt") -> None:
        for i, st in enumerate(self.state):
            st.m = np.array(arrays[f"{prefix}.{i}.m"], copy=True)
            st.v = np.array(arrays[f"{prefix}.{i}.v"], copy=True)
            st.step = int(arrays[f"{prefix}.{i}.step"][0])


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total
