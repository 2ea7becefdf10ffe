"""Training losses and evaluation metrics for binary segmentation.

Supervised training uses binary cross-entropy and soft Dice, weighted
equally by default. Consistency training between two probability fields
uses the same family: BCE with a soft target, plus a Dice gap with squared
denominator so identical fields score exactly zero. IoU and Dice
coefficients are evaluation-only pixel counts, never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor4, add, add_scalar, div, log, mean_all, mul, neg, scale, sigmoid, sum_all

DICE_SMOOTHING = 1.0
DEFAULT_THRESHOLD = 0.5

METRICS_TABLE_HEADER = "training_samples,model,IoU,Dice"


def _validate_logits_target(logits: Tensor4, target: Tensor4, require_binary: bool) -> None:
    if logits.shape != target.shape:
        raise ShapeError(f"loss: logits shape {logits.shape} and target shape "
                         f"{target.shape} differ")
    if require_binary:
        t = target.data
        if not np.all((t == 0) | (t == 1)):
            raise ContractError("loss: target contains values other than 0 and 1")


def bce_loss(logits: Tensor4, target: Tensor4) -> Tensor4:
    """Mean over all pixels of -[t·log σ(z) + (1-t)·log(1-σ(z))]."""
    _validate_logits_target(logits, target, require_binary=True)
    return soft_target_bce(sigmoid(logits), target)


def soft_target_bce(probs: Tensor4, target: Tensor4) -> Tensor4:
    """Cross-entropy of ``probs`` under a (possibly soft) target field."""
    if probs.shape != target.shape:
        raise ShapeError(f"loss: probs shape {probs.shape} and target shape {target.shape} differ")
    ll = add(mul(target, log(probs)), mul(1.0 - target, log(1.0 - probs)))
    return neg(mean_all(ll))


def dice_loss(logits: Tensor4, target: Tensor4, eps: float = DICE_SMOOTHING) -> Tensor4:
    """Soft Dice 1 - (2Σpt + ε)/(Σp + Σt + ε) with p = σ(logits), batch-level sums."""
    _validate_logits_target(logits, target, require_binary=True)
    return dice_loss_probs(sigmoid(logits), target, eps)


def dice_loss_probs(probs: Tensor4, target: Tensor4, eps: float = DICE_SMOOTHING) -> Tensor4:
    if probs.shape != target.shape:
        raise ShapeError(f"loss: probs shape {probs.shape} and target shape {target.shape} differ")
    num = add_scalar(scale(sum_all(mul(probs, target)), 2.0), eps)
    den = add_scalar(add(sum_all(probs), sum_all(target)), eps)
    return add_scalar(neg(div(num, den)), 1.0)


def consistency_dice(a: Tensor4, b: Tensor4, eps: float = DICE_SMOOTHING) -> Tensor4:
    """Dice gap 1 - (2Σab + ε)/(Σa² + Σb² + ε) between two probability fields.

    The squared denominator makes the gap exactly zero when a == b, which the
    plain-sum form only achieves on hard 0/1 fields.
    """
    if a.shape != b.shape:
        raise ShapeError(f"loss: probability fields {a.shape} and {b.shape} differ")
    num = add_scalar(scale(sum_all(mul(a, b)), 2.0), eps)
    den = add_scalar(add(sum_all(mul(a, a)), sum_all(mul(b, b))), eps)
    return add_scalar(neg(div(num, den)), 1.0)


@dataclass
class LossValue:
    """Scalar loss node plus its component breakdown."""
    total: Tensor4
    bce: float
    dice: float


def combined_loss(logits: Tensor4, target: Tensor4,
                  bce_weight: float = 0.5, dice_weight: float = 0.5) -> LossValue:
    """Equal-weight BCE + soft Dice; the default 0.5/0.5 keeps the total in
    the same range as each component."""
    b = bce_loss(logits, target)
    d = dice_loss(logits, target)
    total = add(scale(b, bce_weight), scale(d, dice_weight))
    return LossValue(total=total, bce=b.item(), dice=d.item())


# ---------------------------------------------------------------------------
# evaluation metrics (pixel counting, never on the tape)

def _validate_mask_pair(pred_mask: np.ndarray, target_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred_mask)
    t = np.asarray(target_mask)
    if p.shape != t.shape:
        raise ShapeError(f"metric: mask shapes {p.shape} and {t.shape} differ")
    for name, m in (("pred", p), ("target", t)):
        if not np.all((m == 0) | (m == 1)):
            raise ContractError(f"metric: {name} mask contains values other than 0 and 1")
    return p != 0, t != 0


def iou_metric(pred_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """|P∩G| / |P∪G|; 1.0 when both masks are empty (an all-background
    prediction of an all-background truth is perfect, and 0/0 is avoided)."""
    p, t = _validate_mask_pair(pred_mask, target_mask)
    union = int(np.count_nonzero(p | t))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & t)) / union


def dice_metric(pred_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """2|P∩G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, t = _validate_mask_pair(pred_mask, target_mask)
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if denom == 0:
        return 1.0
    return 2 * int(np.count_nonzero(p & t)) / denom


def binarize(probs: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Probabilities -> uint8 mask; the boundary value maps to water."""
    return (np.asarray(probs) >= threshold).astype(np.uint8)


@dataclass
class MetricsReport:
    """Per-sample and averaged IoU / Dice for a model on one split."""
    per_sample_iou: list[float]
    per_sample_dice: list[float]
    mean_iou: float
    mean_dice: float
    count: int

    @classmethod
    def from_samples(cls, ious: list[float], dices: list[float]) -> "MetricsReport":
        if len(ious) != len(dices) or not ious:
            raise ContractError("MetricsReport needs equally long, nonempty sample lists")
        return cls(
            per_sample_iou=list(ious),
            per_sample_dice=list(dices),
            mean_iou=sum(ious) / len(ious),
            mean_dice=sum(dices) / len(dices),
            count=len(ious),
        )

    def table_row(self, training_samples: int | str, model: str) -> str:
        return f"{training_samples},{model},{self.mean_iou:.4f},{self.mean_dice:.4f}"
