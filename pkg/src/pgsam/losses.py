"""Segmentation losses: BCE + soft Dice and the weighted three-term total."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ValidationError

EPS = 1e-7


@dataclass
class LossConfig:
    w: float = 0.5
    beta: float = 0.5
    dice_smooth: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValidationError(f"w must lie in [0, 1], got {self.w}")
        if self.beta < 0:
            raise ValidationError(f"beta must be non-negative, got {self.beta}")
        if self.dice_smooth <= 0:
            raise ValidationError("dice_smooth must be positive")


def _check(pred, gt):
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape")


def dice_term(pred, gt, smooth=1e-5):
    """``1 - (2 sum(pred*gt) + s) / (sum(pred) + sum(gt) + s)`` over the last two axes."""
    inter = (pred * gt).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1))
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def bce_dice_loss(pred, gt, smooth=1e-5, reduce=True):
    """BCE on probabilities (logs clamped) plus the soft Dice term.

    Inputs are ``[..., H, W]``; the loss is computed per image and averaged
    unless ``reduce`` is false.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    _check(pred, gt)
    p = pred.clamp(EPS, 1 - EPS)
    bce = -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean(dim=(-2, -1))
    loss = bce + dice_term(pred, gt, smooth)
    return loss.mean() if reduce else loss


def bce_dice_loss_logits(logits, gt, smooth=1e-5, reduce=True):
    """Same loss as :func:`bce_dice_loss` from logits (numerically stable BCE)."""
    gt = gt.to(logits.dtype)
    _check(logits, gt)
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none").mean(dim=(-2, -1))
    loss = bce + dice_term(torch.sigmoid(logits), gt, smooth)
    return loss.mean() if reduce else loss


def total_loss(l_dec1, l_dec2, l_prompt, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    return cfg.w * l_dec1 + (1 - cfg.w) * l_dec2 + cfg.beta * l_prompt
