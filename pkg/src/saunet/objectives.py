"""Training losses and evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .data import mask_to_boundary
from .tensor import Tensor

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    dice: float = 1.0
    edge: float = 1.0

    def __post_init__(self):
        vals = (self.ce, self.dice, self.edge)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if not any(vals):
            raise ValueError("at least one loss weight must be nonzero")


def one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    """(N,H,W) integer labels -> (N,K,H,W) one-hot."""
    labels = np.asarray(labels).astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels outside [0, {k})")
    return np.moveaxis(np.eye(k, dtype=dtype)[labels], -1, 1)


def _check_same(a: Tensor, y, what: str):
    ys = y.shape
    if a.shape != ys:
        raise ValueError(f"{what}: prediction {a.shape} vs target {ys}")


def cross_entropy(seg_logits: Tensor, y_onehot) -> Tensor:
    """Pixel-mean categorical cross entropy over channel-softmax probabilities."""
    y = T._as_tensor(y_onehot, seg_logits.dtype)
    _check_same(seg_logits, y, "cross_entropy")
    n, k, h, w = seg_logits.shape
    p = T.clamp(T.softmax_channels(seg_logits), PROB_CLAMP, 1 - PROB_CLAMP)
    return T.scale(T.sum(T.mul(y, T.log(p))), -1.0 / (n * h * w))


def dice_loss(seg_probs: Tensor, y_onehot) -> Tensor:
    """1 - (2/K) sum_k (sum y*p + eps) / (sum y + p + eps), sums over batch and pixels."""
    y = T._as_tensor(y_onehot, seg_probs.dtype)
    _check_same(seg_probs, y, "dice_loss")
    k = seg_probs.shape[1]
    inter = T.sum(T.mul(y, seg_probs), axis=(0, 2, 3))
    denom = T.sum(T.add(y, seg_probs), axis=(0, 2, 3))
    ratio = T.div(T.add(inter, DICE_EPS), T.add(denom, DICE_EPS))
    return T.add(T.scale(T.sum(ratio), -2.0 / k), 1.0)


def edge_bce(edge_logits: Tensor, boundary_gt) -> Tensor:
    y = T._as_tensor(boundary_gt, edge_logits.dtype)
    _check_same(edge_logits, y, "edge_bce")
    yd = y.data
    if not np.all((yd == 0) | (yd == 1)):
        raise ValueError("edge_bce: boundary ground truth must be binary")
    p = T.clamp(T.sigmoid(edge_logits), PROB_CLAMP, 1 - PROB_CLAMP)
    pos = T.mul(y, T.log(p))
    neg = T.mul(Tensor(1 - yd, dtype=yd.dtype), T.log(T.add(T.scale(p, -1.0), 1.0)))
    return T.scale(T.sum(T.add(pos, neg)), -1.0 / edge_logits.size)


def total_loss(ce: Tensor, dice: Tensor, edge: Tensor | None, w: LossWeights) -> Tensor:
    out = T.add(T.scale(ce, w.ce), T.scale(dice, w.dice))
    if edge is not None and w.edge:
        out = T.add(out, T.scale(edge, w.edge))
    return out


# --------------------------------------------------------------------------
# metrics (hard label maps)
# --------------------------------------------------------------------------

def dice_coefficient(pred: np.ndarray, true: np.ndarray, k: int) -> float:
    a, b = pred == k, true == k
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def iou(pred: np.ndarray, true: np.ndarray, k: int) -> float:
    a, b = pred == k, true == k
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def miou(pred: np.ndarray, true: np.ndarray, classes) -> float:
    return float(np.mean([iou(pred, true, k) for k in classes]))


def boundary_f1(pred: np.ndarray, true: np.ndarray, tolerance: int = 1, cls: int | None = None) -> float:
    """F1 of boundary pixels matched within a Chebyshev distance of ``tolerance``.

    With ``cls`` set, boundaries are taken from the binary mask of that class.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    if cls is not None:
        pred, true = (pred == cls).astype(np.int64), (true == cls).astype(np.int64)
    bp, bt = mask_to_boundary(pred) > 0, mask_to_boundary(true) > 0
    np_, nt = int(bp.sum()), int(bt.sum())
    if np_ == 0 and nt == 0:
        return 1.0
    if np_ == 0 or nt == 0:
        return 0.0
    size = 2 * tolerance + 1
    near_t = ndimage.maximum_filter(bt, size=size, mode="constant")
    near_p = ndimage.maximum_filter(bp, size=size, mode="constant")
    precision = (bp & near_t).sum() / np_
    recall = (bt & near_p).sum() / nt
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class MetricReport:
    """Per-class scores averaged over samples; means cover foreground classes."""

    dice: list[float]
    iou: list[float]
    boundary_f1: list[float]
    mean_dice: float
    miou: float
    mean_boundary_f1: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def tsv_rows(self, per_sample: list[tuple[str, list[float], list[float]]]) -> list[str]:
        rows = []
        for sid, dices, ious in per_sample:
            for k, (d, i) in enumerate(zip(dices, ious)):
                rows.append(f"{sid}\t{k}\t{d:.6f}\t{i:.6f}")
        return rows


METRIC_REPORT_SCHEMA = {
    "type": "object",
    "required": ["dice", "iou", "boundary_f1", "mean_dice", "miou", "mean_boundary_f1", "n_samples"],
    "additionalProperties": False,
    "properties": {
        "dice": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "iou": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "boundary_f1": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "mean_dice": {"type": "number", "minimum": 0, "maximum": 1},
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "mean_boundary_f1": {"type": "number", "minimum": 0, "maximum": 1},
        "n_samples": {"type": "integer", "minimum": 0},
    },
}


class MetricAccumulator:
    def __init__(self, k: int, tolerance: int = 1):
        self.k, self.tolerance = k, tolerance
        self.rows: list[tuple[str, list[float], list[float]]] = []
        self.bf1: list[list[float]] = []

    def add(self, sid: str, pred: np.ndarray, true: np.ndarray) -> None:
        ks = range(self.k)
        self.rows.append((sid, [dice_coefficient(pred, true, c) for c in ks], [iou(pred, true, c) for c in ks]))
        self.bf1.append([boundary_f1(pred, true, self.tolerance, cls=c) for c in ks])

    def report(self) -> MetricReport:
        k = self.k
        if not self.rows:
            zeros = [0.0] * k
            return MetricReport(zeros, zeros, zeros, 0.0, 0.0, 0.0, 0)
        d = np.mean([r[1] for r in self.rows], axis=0)
        i = np.mean([r[2] for r in self.rows], axis=0)
        b = np.mean(self.bf1, axis=0)
        return MetricReport(
            dice=[float(v) for v in d],
            iou=[float(v) for v in i],
            boundary_f1=[float(v) for v in b],
            mean_dice=float(np.mean(d[1:])),
            miou=float(np.mean(i[1:])),
            mean_boundary_f1=float(np.mean(b[1:])),
            n_samples=len(self.rows),
        )
