"""Confusion-matrix segmentation metrics: OA, per-class IoU / F1 and their means."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UndefinedMetricError

IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    counts: np.ndarray      # counts[g, p]: ground truth g predicted as p
    ignored: int = 0

    @property
    def K(self):
        return self.counts.shape[0]

    @property
    def pixels(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if self.K != other.K:
            raise ConfigError(f"cannot add confusion matrices over {self.K} and {other.K} classes")
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)

    @classmethod
    def empty(cls, K):
        return cls(np.zeros((K, K), dtype=np.int64), 0)


def confusion(pred, gt, K, ignore=IGNORE_INDEX):
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction and ground truth differ in size ({pred.size} vs {gt.size})")
    keep = gt != ignore
    ignored = int((~keep).sum())
    pred, gt = pred[keep], gt[keep]
    if gt.size and (gt.min() < 0 or gt.max() >= K):
        raise ConfigError(f"ground-truth class id outside [0, {K})")
    if pred.size and (pred.min() < 0 or pred.max() >= K):
        raise ConfigError(f"predicted class id outside [0, {K})")
    counts = np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(counts.astype(np.int64), ignored)


def oa(cm):
    total = cm.counts.sum()
    if total == 0:
        raise UndefinedMetricError("overall accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / total)


def _tp_fp_fn(cm):
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    return tp, c.sum(0) - tp, c.sum(1) - tp


def _nanmean(v):
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def iou_per_class(cm):
    """``TP / (TP + FP + FN)``; classes with an empty union are NaN and skipped in the mean."""
    tp, fp, fn = _tp_fp_fn(cm)
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou, _nanmean(iou)


def f1_per_class(cm):
    """``2 TP / (2 TP + FP + FN)``, the harmonic mean of precision and recall."""
    tp, fp, fn = _tp_fp_fn(cm)
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2 * tp / denom, np.nan)
    return f1, _nanmean(f1)


def report(cm, class_names=None):
    """JSON-ready metrics document.

    Besides the all-class figures, ``without_last_class`` repeats OA/mIoU/mean F1
    with the last class (clutter) excluded from the means and its ground-truth
    pixels removed.
    """
    names = class_names or [str(k) for k in range(cm.K)]
    iou, miou = iou_per_class(cm)
    f1, mf1 = f1_per_class(cm)
    doc = {
        "oa": oa(cm),
        "miou": miou,
        "mean_f1": mf1,
        "per_class": [{"id": k, "name": names[k], "iou": _num(iou[k]), "f1": _num(f1[k])} for k in range(cm.K)],
        "pixels": cm.pixels,
        "ignored": int(cm.ignored),
        "conventions": {"ignore_index": IGNORE_INDEX,
                        "empty_union": "per-class value null, excluded from means"},
    }
    if cm.K > 1:
        kept = cm.counts[:-1, :]
        total = kept.sum()
        sub_iou, sub_f1 = iou[:-1], f1[:-1]
        doc["without_last_class"] = {
            "excluded": names[-1],
            "oa": float(np.trace(kept[:, :-1]) / total) if total else None,
            "miou": _num(_nanmean(sub_iou)),
            "mean_f1": _num(_nanmean(sub_f1)),
        }
    return doc


def _num(v):
    return None if np.isnan(v) else float(v)
