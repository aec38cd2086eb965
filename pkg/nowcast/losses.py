"""
Training objectives: earth-mover pre-training loss, the soft-CSI
nowcasting loss, cross entropy, focal loss and sum of squared errors.

Probability inputs are torch tensors with classes on the last axis;
class labels are PrecipClass codes (0 OTHERS, 1 LIGHT, 2 HEAVY).
"""

from dataclasses import dataclass

import numpy as np
import torch

from nowcast.errors import InvalidGamma, LengthMismatch, UnnormalizedProbabilities

CSI_EPS = 1e-8
PROB_FLOOR = 1e-12
DEFAULT_GAMMA = 2.0
LOSS_CHOICES = ("csi", "focal", "ce")


def _tolerance(dtype):
    return 1e-6 if dtype == torch.float64 else 1e-4


def _check_normalized(probs):
    sums = probs.detach().sum(dim=-1)
    worst = (sums - 1).abs().max().item() if sums.numel() else 0.0
    if worst > _tolerance(probs.dtype):
        raise UnnormalizedProbabilities(f"Probability vectors must sum to 1, worst deviation {worst:.3g}")


def _as_classes(truth, device=None):
    if isinstance(truth, torch.Tensor):
        return truth.to(device=device, dtype=torch.long).reshape(-1)
    return torch.as_tensor(np.asarray(truth, dtype=np.int64).reshape(-1), device=device)


# -------------------------------------------------------------------
# PRE-TRAINING
# -------------------------------------------------------------------
def emd_pretrain_loss(pred_probs, truth, reduction="sum"):
    """
    Earth-mover distance between a distribution over r_max reflectivity
    classes (class r centered at r - 1 dBZ) and the true reflectivity.

    Args:
        pred_probs: (..., r_max) probabilities per labeled pixel
        truth: (...) clamped dBZ per pixel
        reduction: "sum" over pixels, or "mean" over pixels
    """
    _check_normalized(pred_probs)
    r_max = pred_probs.shape[-1]
    centers = torch.arange(r_max, dtype=pred_probs.dtype, device=pred_probs.device)
    truth = torch.as_tensor(truth, dtype=pred_probs.dtype, device=pred_probs.device)
    per_pixel = (pred_probs * (centers - truth.unsqueeze(-1)).abs()).sum(dim=-1)
    if reduction == "mean":
        return per_pixel.mean()
    return per_pixel.sum()


# -------------------------------------------------------------------
# SOFT CSI
# -------------------------------------------------------------------
@dataclass(frozen=True)
class SoftConfusion:
    """Soft TP/FP/FN; index 0 is RAIN, index 1 is HEAVY."""

    tp: torch.Tensor
    fp: torch.Tensor
    fn: torch.Tensor

    @classmethod
    def zeros(cls, dtype=torch.float32, device=None):
        z = torch.zeros(2, dtype=dtype, device=device)
        return cls(z, z.clone(), z.clone())

    def __add__(self, other):
        return SoftConfusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def soft_memberships(pred_probs):
    """(..., 3) class probabilities -> (..., 2) soft membership in RAIN and HEAVY."""
    return torch.stack([pred_probs[..., 1] + pred_probs[..., 2], pred_probs[..., 2]], dim=-1)


def soft_confusion_update(acc, pred_probs, truth):
    """Accumulate one or many (probability vector, true class) pairs into acc."""
    _check_normalized(pred_probs)
    probs = pred_probs.reshape(-1, 3)
    classes = _as_classes(truth, probs.device)
    if classes.numel() != probs.shape[0]:
        raise LengthMismatch(f"{probs.shape[0]} predictions but {classes.numel()} labels")

    q = soft_memberships(probs)
    y = torch.stack([classes >= 1, classes == 2], dim=-1).to(q.dtype)
    return SoftConfusion(
        tp=acc.tp + (q * y).sum(dim=0),
        fp=acc.fp + (q * (1 - y)).sum(dim=0),
        fn=acc.fn + ((1 - q) * y).sum(dim=0),
    )


def csi_loss(acc):
    """Negative mean of the soft CSI for RAIN and HEAVY, in [-1, 0]."""
    csi = acc.tp / (acc.tp + acc.fp + acc.fn + CSI_EPS)
    return -0.5 * csi.sum()


# -------------------------------------------------------------------
# CLASSIFICATION BASELINE LOSSES
# -------------------------------------------------------------------
def _truth_probability(pred_probs, truth):
    _check_normalized(pred_probs)
    probs = pred_probs.reshape(-1, pred_probs.shape[-1])
    classes = _as_classes(truth, probs.device)
    if classes.numel() != probs.shape[0]:
        raise LengthMismatch(f"{probs.shape[0]} predictions but {classes.numel()} labels")
    return probs.gather(1, classes.unsqueeze(1)).squeeze(1)


def cross_entropy_loss(pred_probs, truth):
    """Sum over instances of -log q(truth)."""
    q = _truth_probability(pred_probs, truth)
    return -torch.log(q.clamp(min=PROB_FLOOR)).sum()


def focal_loss(pred_probs, truth, gamma=DEFAULT_GAMMA):
    if gamma < 0:
        raise InvalidGamma(f"gamma must be non-negative, got {gamma}")
    if gamma == 0:
        return cross_entropy_loss(pred_probs, truth)
    q = _truth_probability(pred_probs, truth)
    return ((1 - q) ** gamma * -torch.log(q.clamp(min=PROB_FLOOR))).sum()


def sse_loss(preds, truths):
    preds = torch.as_tensor(preds)
    truths = torch.as_tensor(truths, dtype=preds.dtype, device=preds.device)
    if preds.numel() != truths.numel():
        raise LengthMismatch(f"{preds.numel()} predictions but {truths.numel()} targets")
    return ((preds.reshape(-1) - truths.reshape(-1)) ** 2).sum()


def nowcast_loss(choice, pred_probs, truth, gamma=DEFAULT_GAMMA):
    """The fine-tuning objective selected by loss_choice, over a whole batch."""
    if choice == "csi":
        acc = SoftConfusion.zeros(dtype=pred_probs.dtype, device=pred_probs.device)
        return csi_loss(soft_confusion_update(acc, pred_probs, truth))
    if choice == "focal":
        return focal_loss(pred_probs, truth, gamma)
    if choice == "ce":
        return cross_entropy_loss(pred_probs, truth)
    raise ValueError(f"Unknown loss {choice!r}, expected one of {LOSS_CHOICES}")
