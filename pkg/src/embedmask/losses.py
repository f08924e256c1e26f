"""Text cross-entropy, mask BCE/DICE and their weighted combination."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    txt: float = 1.0
    mask: float = 1.0
    bce: float = 2.0
    dice: float = 0.5

    def __post_init__(self):
        for name in ("txt", "mask", "bce", "dice"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name}={v} must be finite and >= 0")


def text_ce(logits, targets, loss_mask):
    """Mean cross-entropy over positions where ``loss_mask`` is set.

    ``logits[t]`` is scored against ``targets[t]``; callers shift the
    sequence themselves.
    """
    loss_mask = loss_mask.bool()
    n = int(loss_mask.sum())
    if n == 0:
        raise ValueError("empty assistant span: nothing to supervise")
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    return (ce * loss_mask.reshape(-1).to(ce.dtype)).sum() / n


def _check_shapes(logits, target):
    if logits.shape != target.shape:
        raise ValueError(f"mask shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")


def bce_loss(logits, target):
    """Mean per-pixel logistic cross-entropy on logits."""
    _check_shapes(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def dice_loss(logits, target, eps=DICE_EPS):
    """Soft DICE on sigmoid probabilities with additive smoothing ``eps``."""
    _check_shapes(logits, target)
    p = torch.sigmoid(logits)
    t = target.to(logits.dtype)
    return 1.0 - (2.0 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps)


def mask_loss(bce, dice, weights):
    return weights.bce * bce + weights.dice * dice


def total_loss(txt, mask_terms, weights):
    """``txt_w * txt + mask_w * mean_k(bce_w * bce_k + dice_w * dice_k)``.

    ``mask_terms`` is a sequence of (bce, dice) pairs, one per mask. An empty
    sequence gives the text term alone.
    """
    total = weights.txt * txt
    if len(mask_terms):
        per_mask = [mask_loss(b, d, weights) for b, d in mask_terms]
        total = total + weights.mask * (sum(per_mask) / len(per_mask))
    return total


@dataclass
class LossBreakdown:
    """Batch means of each loss term; mask-free samples count as zero in bce/dice."""

    txt: float
    bce: float
    dice: float
    total: float

    def weighted_sum(self, weights):
        return weights.txt * self.txt + weights.mask * (weights.bce * self.bce + weights.dice * self.dice)
