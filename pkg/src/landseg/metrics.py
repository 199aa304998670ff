"""Binary cross-entropy, Dice, pixel accuracy and per-pixel class assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BCE_CLAMP = 1e-7


def bce_loss(probs: np.ndarray, targets: np.ndarray, clamp: float = BCE_CLAMP):
    """Mean binary cross-entropy and its gradient w.r.t. ``probs``.

    ``probs`` is clamped to ``[clamp, 1 - clamp]`` before the logs. The
    gradient is evaluated at the clamped value, so saturated wrong
    predictions still receive a (large, finite) push back.
    Returns ``(loss, grad_probs)``; the loss is a Python float computed in f64.
    """
    if probs.shape != targets.shape:
        raise ValueError(f"probs shape {probs.shape} != targets shape {targets.shape}")
    y = np.asarray(targets, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        bad = y[(y != 0) & (y != 1)].flat[0]
        raise ValueError(f"targets must be binary (0 or 1), found {bad}")
    p = np.clip(probs.astype(np.float64), clamp, 1.0 - clamp)
    n = p.size
    loss = float(np.mean(-y * np.log(p) - (1.0 - y) * np.log1p(-p)))
    grad = (p - y) / (p * (1.0 - p)) / n
    return loss, grad.astype(probs.dtype)


def one_hot(mask: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """(…, H, W) class ids -> (…, n_classes, H, W) one-hot targets."""
    mask = np.asarray(mask)
    eye = np.eye(n_classes, dtype=dtype)
    return np.moveaxis(eye[mask], -1, -3)


def class_assign(probs: np.ndarray) -> np.ndarray:
    """Argmax over the class axis (third from last); ties go to the lowest index."""
    if probs.ndim < 3 or probs.shape[-3] < 1:
        raise ValueError(f"probs must be (..., classes, H, W), got shape {probs.shape}")
    return probs.argmax(axis=-3).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def dice(self) -> float:
        """``2TP / (2TP + FN + FP)``; 1.0 when the class is absent from both masks."""
        denom = 2 * self.tp + self.fn + self.fp
        return 1.0 if denom == 0 else 2 * self.tp / denom


def _same_shape(pred, true):
    if np.shape(pred) != np.shape(true):
        raise ValueError(f"mask shapes differ: {np.shape(pred)} vs {np.shape(true)}")


def confusion(pred_mask: np.ndarray, true_mask: np.ndarray, class_id: int) -> ConfusionCounts:
    _same_shape(pred_mask, true_mask)
    p = np.asarray(pred_mask) == class_id
    t = np.asarray(true_mask) == class_id
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice_coefficient(pred_mask: np.ndarray, true_mask: np.ndarray, class_id: int) -> float:
    return confusion(pred_mask, true_mask, class_id).dice()


def macro_dice(pred_mask: np.ndarray, true_mask: np.ndarray, n_classes: int) -> float:
    return float(np.mean([dice_coefficient(pred_mask, true_mask, c) for c in range(n_classes)]))


def pixel_accuracy(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    _same_shape(pred_mask, true_mask)
    pred, true = np.asarray(pred_mask), np.asarray(true_mask)
    return int(np.count_nonzero(pred == true)) / pred.size


class ConfusionMatrix:
    """Class-by-class pixel counts accumulated over many masks.

    Rows are true classes, columns predicted. Per-class Dice and pixel
    accuracy computed from the pooled counts weight every pixel of the split
    equally.
    """

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred_mask: np.ndarray, true_mask: np.ndarray) -> None:
        _same_shape(pred_mask, true_mask)
        k = self.n_classes
        idx = np.asarray(true_mask, np.int64).ravel() * k + np.asarray(pred_mask, np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)

    def class_counts(self, c: int) -> ConfusionCounts:
        m = self.counts
        tp = int(m[c, c])
        fp = int(m[:, c].sum()) - tp
        fn = int(m[c, :].sum()) - tp
        return ConfusionCounts(tp, fp, fn, int(m.sum()) - tp - fp - fn)

    def per_class_dice(self) -> list[float]:
        return [self.class_counts(c).dice() for c in range(self.n_classes)]

    def macro_dice(self) -> float:
        return float(np.mean(self.per_class_dice()))

    def accuracy(self) -> float:
        total = int(self.counts.sum())
        return int(np.trace(self.counts)) / total if total else float("nan")
