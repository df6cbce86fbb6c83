"""Binary segmentation evaluation: confusion counts, PRE/REC/F1/IoU, MaxF,
and TP/FN/FP overlay rendering.

Dataset-level metrics are computed from summed confusion counts, not from
averaged per-image scores; per-image counts are exposed so either aggregation
can be recomputed downstream.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

# 255 evenly spaced thresholds i/256, i = 1..255; includes 0.5 exactly.
DEFAULT_THRESHOLDS = tuple(np.linspace(0.0, 1.0, 257)[1:-1].tolist())

OVERLAY_ALPHA = 0.5
TINT_TP = (0.0, 1.0, 0.0)  # green
TINT_FN = (0.0, 0.0, 1.0)  # blue
TINT_FP = (1.0, 0.0, 0.0)  # red


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts of a binary confusion matrix."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclasses.dataclass(frozen=True)
class Scores:
    """Derived metrics; degenerate marks any zero-denominator fallback to 0."""

    pre: float
    rec: float
    f1: float
    iou: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"PRE": self.pre, "REC": self.rec, "F1": self.f1, "IoU": self.iou}


def _check_binary(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise ConfigError(f"{name} must contain only 0/1 values")
    return arr.astype(bool)


def confusion(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> ConfusionCounts:
    """Count TP/FP/FN/TN over valid pixels. pred and gt are binary masks."""
    pred = _check_binary(pred, "pred")
    gt = _check_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ConfigError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != pred.shape:
            raise ConfigError(f"valid mask shape {valid.shape} != {pred.shape}")
    p = pred[valid]
    g = gt[valid]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def scores(c: ConfusionCounts) -> Scores:
    """PRE = TP/(TP+FP), REC = TP/(TP+FN), F1 = 2PR/(P+R), IoU = TP/(TP+FP+FN).

    Every zero-denominator ratio evaluates to 0 and sets the degenerate flag.
    """
    degenerate = False
    if c.tp + c.fp > 0:
        pre = c.tp / (c.tp + c.fp)
    else:
        pre, degenerate = 0.0, True
    if c.tp + c.fn > 0:
        rec = c.tp / (c.tp + c.fn)
    else:
        rec, degenerate = 0.0, True
    if pre + rec > 0:
        f1 = 2.0 * pre * rec / (pre + rec)
    else:
        f1, degenerate = 0.0, True
    if c.tp + c.fp + c.fn > 0:
        iou = c.tp / (c.tp + c.fp + c.fn)
    else:
        iou, degenerate = 0.0, True
    return Scores(pre=pre, rec=rec, f1=f1, iou=iou, degenerate=degenerate)


def aggregate(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    """Sum per-image counts into dataset-level counts."""
    out = ConfusionCounts()
    for c in counts:
        out = out + c
    return out


@dataclasses.dataclass(frozen=True)
class MaxFResult:
    maxf: float
    threshold: float


def maxf(
    prob: np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray | None = None,
    thresholds: Sequence[float] | None = None,
) -> MaxFResult:
    """Maximum F1 over a threshold sweep of the foreground probability map."""
    thresholds = _check_thresholds(thresholds)
    prob = np.asarray(prob, dtype=np.float64)
    best_f, best_t = -1.0, thresholds[0]
    for t in thresholds:
        s = scores(confusion((prob >= t).astype(np.uint8), gt, valid))
        if s.f1 > best_f:
            best_f, best_t = s.f1, t
    return MaxFResult(maxf=best_f, threshold=best_t)


def maxf_dataset(
    probs: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    valids: Sequence[np.ndarray] | None = None,
    thresholds: Sequence[float] | None = None,
) -> MaxFResult:
    """Dataset-level MaxF: per threshold, sum counts over images, then F1."""
    thresholds = _check_thresholds(thresholds)
    if valids is None:
        valids = [None] * len(probs)
    best_f, best_t = -1.0, thresholds[0]
    for t in thresholds:
        total = ConfusionCounts()
        for prob, gt, valid in zip(probs, gts, valids):
            prob = np.asarray(prob, dtype=np.float64)
            total = total + confusion((prob >= t).astype(np.uint8), gt, valid)
        s = scores(total)
        if s.f1 > best_f:
            best_f, best_t = s.f1, t
    return MaxFResult(maxf=best_f, threshold=best_t)


def _check_thresholds(thresholds: Sequence[float] | None) -> Sequence[float]:
    if thresholds is None:
        return DEFAULT_THRESHOLDS
    thresholds = list(thresholds)
    if not thresholds:
        raise ConfigError("threshold list must be non-empty")
    if not all(0.0 < t < 1.0 for t in thresholds):
        raise ConfigError("thresholds must lie strictly inside (0, 1)")
    return thresholds


def overlay(pred: np.ndarray, gt: np.ndarray, rgb: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Tint TP green, FN blue, FP red on top of rgb; TN pixels pass through.

    rgb is (H, W, 3) in [0, 1]; the result has the same shape and range.
    """
    pred = _check_binary(pred, "pred")
    gt = _check_binary(gt, "gt")
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[:2] != pred.shape or rgb.shape[2:] != (3,):
        raise ConfigError(f"rgb shape {rgb.shape} incompatible with masks {pred.shape}")
    out = rgb.copy()
    for mask, tint in (
        (pred & gt, TINT_TP),
        (~pred & gt, TINT_FN),
        (pred & ~gt, TINT_FP),
    ):
        out[mask] = (1.0 - alpha) * rgb[mask] + alpha * np.asarray(tint)
    return out
