"""Low-rank adapters and the trainable-parameter policy."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
from torch import nn


class LoraLinear(nn.Module):
    """``base(x) + (alpha / r) * B @ A @ x`` with ``B`` starting at zero."""

    def __init__(self, base: nn.Linear, r: int = 8, alpha: float = 16.0):
        super().__init__()
        d_in, d_out = base.in_features, base.out_features
        if r < 1 or r > min(d_in, d_out):
            raise ValueError(f"LoRA rank {r} must be in [1, {min(d_in, d_out)}]")
        self.base = base
        self.r = r
        self.alpha = alpha
        self.scaling = alpha / r
        w = base.weight
        self.lora_A = nn.Parameter(torch.empty(r, d_in, dtype=w.dtype, device=w.device))
        self.lora_B = nn.Parameter(torch.zeros(d_out, r, dtype=w.dtype, device=w.device))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    @property
    def delta_weight(self):
        return self.scaling * (self.lora_B @ self.lora_A)

    def forward(self, x):
        return self.base(x) + self.scaling * ((x @ self.lora_A.t()) @ self.lora_B.t())


def wrap_linear(layer, r=8, alpha=16.0):
    return LoraLinear(layer, r=r, alpha=alpha)


def inject_lora(module, targets, r=8, alpha=16.0):
    """Replace every ``nn.Linear`` child whose attribute name is in ``targets``; returns wrapped names."""
    wrapped = []
    for name, mod in list(module.named_modules()):
        for cname, child in list(mod.named_children()):
            if cname in targets and isinstance(child, nn.Linear):
                setattr(mod, cname, wrap_linear(child, r, alpha))
                wrapped.append(f"{name}.{cname}" if name else cname)
    return wrapped


GROUPS = (
    "lm_base",
    "lora",
    "vision_encoder",
    "vision_lora",
    "decoder",
    "embed_tokens",
    "lm_head",
    "gamma",
)


def param_group(name):
    """Map a parameter path of the full segmentation model to its freeze group."""
    top = name.split(".", 1)[0]
    is_lora = ".lora_A" in name or ".lora_B" in name or name.startswith(("lora_A", "lora_B"))
    if top == "vision":
        return "vision_lora" if is_lora else "vision_encoder"
    if top == "lm":
        if is_lora:
            return "lora"
        if name.startswith("lm.embed_tokens"):
            return "embed_tokens"
        if name.startswith("lm.lm_head"):
            return "lm_head"
        return "lm_base"
    if top == "mm_projector":
        return "lm_base"
    if top == "gamma":
        return "gamma"
    if top == "decoder":
        return "decoder"
    raise KeyError(f"parameter {name!r} belongs to no known group")


@dataclass(frozen=True)
class FreezePolicy:
    lm_base: bool = False
    lora: bool = True
    vision_encoder: bool = False
    vision_lora: bool = True
    decoder: bool = True
    embed_tokens: bool = True
    lm_head: bool = True
    gamma: bool = True

    def trainable(self, group):
        return getattr(self, group)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def apply_policy(model, policy):
    for name, p in model.named_parameters():
        p.requires_grad_(policy.trainable(param_group(name)))


def trainable_parameters(model, policy):
    """Named parameters whose group the policy marks trainable."""
    return {n: p for n, p in model.named_parameters() if policy.trainable(param_group(n))}


def parameter_counts(model, policy):
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in trainable_parameters(model, policy).values())
    return trainable, total
