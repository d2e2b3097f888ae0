"""Attention-head pruning for all-attention language models.

A numpy reverse-mode autodiff core, an all-attention Transformer LM with
segment memory, hard-concrete head gates, a pruning trainer with structural
head removal, and closed-form parameter/MAC accounting.
"""

from .cost_model import ArchSpec, allatt_macs, allatt_params, cost_report, txl_macs, txl_params
from .gating import GateSet, HardConcreteConfig
from .model import AllAttentionLM, ModelConfig
from .trainer import PruneMask, PruneSchedule, apply_structural_prune, evaluate

__version__ = "0.1.0"

__all__ = [
    "AllAttentionLM",
    "ArchSpec",
    "GateSet",
    "HardConcreteConfig",
    "ModelConfig",
    "PruneMask",
    "PruneSchedule",
    "allatt_macs",
    "allatt_params",
    "apply_structural_prune",
    "cost_report",
    "evaluate",
    "txl_macs",
    "txl_params",
]
