"""Training loss (cross-entropy plus Lovasz-softmax) and change-detection metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .nn import functional as F
from .tensor import Tensor, make_result


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"logits must be [N,2,H,W], got {logits.shape}")
    n, _, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ContractError("target labels must be 0 or 1")
    return target.astype(np.int64)


def _one_hot(target: np.ndarray, dtype) -> np.ndarray:
    return np.stack([target == 0, target == 1], axis=1).astype(dtype)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[target]``."""
    target = _check_target(logits, target)
    onehot = _one_hot(target, logits.dtype)
    logp = F.log_softmax(logits, axis=1)
    return T.neg(T.reduce("sum", logp * onehot)) * (1.0 / target.size)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a ground-truth indicator sorted by error."""
    gt_sorted = gt_sorted.astype(np.float64)
    total = gt_sorted.sum()
    intersection = total - np.cumsum(gt_sorted)
    union = total + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_hinge_flat(errors: Tensor, fg: np.ndarray) -> Tensor:
    """``<sort_desc(errors), lovasz_grad(fg sorted alike)>`` for flat 1-d inputs.

    Ties sort by pixel index, so the piecewise-linear gradient is
    deterministic.
    """
    e = errors.data
    order = np.argsort(-e, kind="stable")
    weights = lovasz_grad(fg[order]).astype(e.dtype)
    value = np.dot(e[order], weights)

    def bw(g):
        grad = np.empty_like(e)
        grad[order] = weights
        return (g * grad,)

    return make_result(np.asarray(value, dtype=e.dtype), (errors,), bw)


def lovasz_softmax(logits: Tensor, target) -> Tensor:
    """Lovasz extension of the Jaccard loss, pooled over the batch, averaged over present classes."""
    target = _check_target(logits, target)
    probs = T.exp(F.log_softmax(logits, axis=1))
    losses = []
    for c in (0, 1):
        fg = (target == c).reshape(-1)
        if not fg.any():
            continue
        p = T.reshape(T.getitem(probs, (slice(None), c)), (-1,))
        sign = np.where(fg, -1.0, 1.0).astype(logits.dtype)
        errors = p * sign + fg.astype(logits.dtype)  # 1 - p on foreground, p elsewhere
        losses.append(lovasz_hinge_flat(errors, fg))
    if not losses:
        return T.Tensor(np.zeros((), dtype=logits.dtype))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def total_loss(logits: Tensor, target) -> Tensor:
    """Unweighted sum of cross-entropy and Lovasz-softmax."""
    return cross_entropy(logits, target) + lovasz_softmax(logits, target)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError(f"confusion counts must be non-negative: {self}")

    @classmethod
    def from_masks(cls, pred, target) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        target = np.asarray(target).astype(bool)
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
        tp = int(np.count_nonzero(pred & target))
        fp = int(np.count_nonzero(pred & ~target))
        fn = int(np.count_nonzero(~pred & target))
        return cls(tp, fp, fn, pred.size - tp - fp - fn)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


METRIC_NAMES = ("Rec", "Pre", "OA", "F1", "IoU")


def metrics(counts: ConfusionCounts) -> dict[str, float]:
    """Recall, precision, overall accuracy, F1 and IoU of the change class.

    A zero denominator yields 0, except that a scene with no true and no
    predicted change scores 1 on OA, F1 and IoU.
    """
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    total = counts.total
    if tp + fp + fn == 0:
        f1 = iou = 1.0
    else:
        f1 = 2 * tp / (2 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
    return {
        "Rec": tp / (tp + fn) if tp + fn else 0.0,
        "Pre": tp / (tp + fp) if tp + fp else 0.0,
        "OA": (tp + tn) / total if total else 1.0,
        "F1": f1,
        "IoU": iou,
    }


def f1_iou_from_pre_rec(pre: float, rec: float, scale: float = 1.0) -> tuple[float, float]:
    """F1 and IoU implied by a precision/recall pair; ``scale=100`` for percentages."""
    if pre + rec == 0:
        return 0.0, 0.0
    f1 = 2 * pre * rec / (pre + rec)
    return f1, scale * f1 / (2 * scale - f1)
