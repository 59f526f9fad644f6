"""Low-rank adapter injection for nn.Linear modules.

The base weight stays frozen; only the rank-decomposed update (B @ A, scaled
by alpha/rank) trains. B starts at zero so an untrained adapter is a no-op.
"""

from __future__ import annotations

import math

import torch
from torch import nn

DEFAULT_TARGET_MODULES = ("q_proj", "k_proj", "v_proj", "o_proj",
                          "up_proj", "down_proj")


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        for parameter in self.base.parameters():
            parameter.requires_grad_(False)

    def forward(self, x):
        update = self.dropout(x) @ self.lora_a.T @ self.lora_b.T
        return self.base(x) + update * self.scaling


def inject_lora(model: nn.Module, target_modules=DEFAULT_TARGET_MODULES,
                rank: int = 8, alpha: float = 16.0, dropout: float = 0.0) -> int:
    """Wrap every matching nn.Linear in place; returns the adapter count."""
    replaced = 0
    for parent_name, parent in list(model.named_modules()):
        for child_name, child in list(parent.named_children()):
            if isinstance(child, nn.Linear) and child_name in target_modules:
                setattr(parent, child_name, LoRALinear(child, rank, alpha, dropout))
                replaced += 1
    return replaced


def mark_only_adapters_trainable(model: nn.Module) -> tuple[int, int]:
    """Freeze everything except adapter factors; returns (trainable, total)."""
    total = trainable = 0
    for name, parameter in model.named_parameters():
        is_adapter = "lora_a" in name or "lora_b" in name
        parameter.requires_grad_(is_adapter)
        total += parameter.numel()
        if is_adapter:
            trainable += parameter.numel()
    return trainable, total


def adapter_state(model: nn.Module) -> dict[str, dict[str, torch.Tensor]]:
    """Adapter factors keyed by module path, detached for serialization."""
    state = {}
    for name, module in model.named_modules():
        if isinstance(module, LoRALinear):
            state[name] = {
                "lora_a": module.lora_a.detach().clone(),
                "lora_b": module.lora_b.detach().clone(),
                "rank": module.rank,
                "alpha": module.alpha,
            }
    return state
