"""Training objective (dice + focal + IoU regression) and overlap metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import torch

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    lambda_dice: float = 0.8
    lambda_focal: float = 0.2
    gamma: float = 2.0
    smooth: float = 1e-6

    def __post_init__(self):
        if self.lambda_dice < 0 or self.lambda_focal < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_dice == 0 and self.lambda_focal == 0:
            raise ValueError("at least one of lambda_dice, lambda_focal must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.smooth <= 0:
            raise ValueError("smooth must be positive")


def _check_pair(p: torch.Tensor, y: torch.Tensor) -> None:
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != target shape {tuple(y.shape)}")


def _per_image(x: torch.Tensor) -> torch.Tensor:
    # (H, W) -> (1, H*W); (B, ..., H, W) -> (B, -1)
    return x.reshape(1, -1) if x.dim() <= 2 else x.reshape(x.shape[0], -1)


def dice_loss(p: torch.Tensor, y: torch.Tensor, smooth: float = 1e-6) -> torch.Tensor:
    """``1 - (2 sum(p y) + eps) / (sum p + sum y + eps)`` per image, averaged over the batch."""
    _check_pair(p, y)
    p, y = _per_image(p), _per_image(y).to(p.dtype)
    inter = (p * y).sum(1)
    return (1 - (2 * inter + smooth) / (p.sum(1) + y.sum(1) + smooth)).mean()


def focal_loss(p: torch.Tensor, y: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Pixel mean of ``-(1 - p_t)^gamma log p_t`` without a class-balance factor."""
    _check_pair(p, y)
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    y = y.to(p.dtype)
    p_t = p * y + (1 - p) * (1 - y)
    return (-(1 - p_t).pow(gamma) * torch.log(p_t)).mean()


def binary_cross_entropy(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def soft_iou(pred_mask: torch.Tensor, y: torch.Tensor, smooth: float = 1e-6) -> torch.Tensor:
    """Smoothed IoU per image for hard masks; ``(B,)``."""
    _check_pair(pred_mask, y)
    a, b = _per_image(pred_mask).double(), _per_image(y).double()
    inter = (a * b).sum(1)
    union = a.sum(1) + b.sum(1) - inter
    return (inter + smooth) / (union + smooth)


def iou_mse_loss(predicted_iou: torch.Tensor, p: torch.Tensor, y: torch.Tensor,
                 smooth: float = 1e-6) -> torch.Tensor:
    """``(s_hat - IoU(p > 0.5, y))^2``; the target is detached from the graph."""
    with torch.no_grad():
        target = soft_iou((p > 0.5).to(p.dtype), y, smooth).to(predicted_iou.dtype)
    return ((predicted_iou.reshape(-1) - target.reshape(-1)) ** 2).mean()


def total_loss(p: torch.Tensor, y: torch.Tensor, predicted_iou: torch.Tensor,
               config: LossConfig = LossConfig(), return_parts: bool = False):
    parts = {
        "dice": dice_loss(p, y, config.smooth),
        "focal": focal_loss(p, y, config.gamma),
        "iou_mse": iou_mse_loss(predicted_iou, p, y, config.smooth),
    }
    total = config.lambda_dice * parts["dice"] + config.lambda_focal * parts["focal"] + parts["iou_mse"]
    if return_parts:
        return total, parts
    return total


def overlap_counts(pred: torch.Tensor, gt: torch.Tensor):
    """Integer ``(|P & G|, |P|, |G|)`` for binary masks."""
    _check_pair(pred, gt)
    pb, gb = pred.bool(), gt.bool()
    return int((pb & gb).sum()), int(pb.sum()), int(gb.sum())


def metrics(pred: torch.Tensor, gt: torch.Tensor) -> Dict[str, float]:
    """Dice, IoU and pixel F1 in percent for one hard-mask pair.

    Empty-vs-empty scores 100 on all three.
    """
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if not torch.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} mask is not binary")
    inter, n_p, n_g = overlap_counts(pred, gt)
    union = n_p + n_g - inter
    if n_p + n_g == 0:
        return {"dice": 100.0, "iou": 100.0, "f1": 100.0}
    dice = 2 * inter / (n_p + n_g)
    iou = inter / union
    precision = inter / n_p if n_p else 0.0
    recall = inter / n_g if n_g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"dice": 100 * dice, "iou": 100 * iou, "f1": 100 * f1}
