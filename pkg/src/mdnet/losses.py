"""Binary cross-entropy + Dice loss and its deep-supervision sum over the three heads."""

from __future__ import annotations

from collections.abc import Sequence

import torch


def bce_with_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # max(x, 0) - x*t + log(1 + exp(-|x|)) never overflows
    loss = logits.clamp(min=0) - logits * target + torch.log1p(torch.exp(-logits.abs()))
    return loss.mean()


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss per sample, averaged over the batch."""
    p = torch.sigmoid(logits).flatten(1)
    g = target.flatten(1)
    inter = (p * g).sum(dim=1)
    score = (2.0 * inter + smooth) / (p.sum(dim=1) + g.sum(dim=1) + smooth)
    return (1.0 - score).mean()


def bce_dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ in shape")
    if logits.dim() < 2:
        logits, target = logits.reshape(1, -1), target.reshape(1, -1)
    target = target.to(logits.dtype)
    return bce_with_logits(logits, target) + dice_loss(logits, target, smooth)


def deep_supervision_loss(
    outputs: Sequence[torch.Tensor],
    target: torch.Tensor,
    weights: Sequence[float] = (1.0, 1.0, 1.0),
    smooth: float = 1.0,
) -> torch.Tensor:
    total = outputs[0].new_zeros(())
    for w, logits in zip(weights, outputs):
        if w:
            total = total + w * bce_dice_loss(logits, target, smooth)
    return total


def per_head_losses(outputs: Sequence[torch.Tensor], target: torch.Tensor, smooth: float = 1.0) -> list[float]:
    return [float(bce_dice_loss(m, target, smooth)) for m in outputs]


def hard_dice(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Hard Dice of thresholded probabilities per sample (1.0 when both are empty)."""
    pred = (probs > 0.5).flatten(1).to(torch.float64)
    g = target.flatten(1).to(torch.float64)
    inter = (pred * g).sum(1)
    denom = pred.sum(1) + g.sum(1)
    return torch.where(denom > 0, 2 * inter / denom.clamp(min=1), torch.ones_like(denom))

