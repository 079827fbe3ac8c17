"""Saliency evaluation: PR curve, adaptive-threshold F-measure, MAE, ROC-AUC and AP.

Conventions:

* a map is binarised as ``sal >= t`` at the 256 thresholds ``t = j / 255``;
* precision is 1 when nothing is predicted positive;
* images whose ground truth has no positive pixel are left out of every
  metric except MAE (AUC and AP also need at least one negative pixel);
* dataset values are unweighted means over images.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

THRESHOLDS = np.arange(256) / 255.0
ETA2 = 0.3


@dataclass
class EvalPair:
    sal: np.ndarray
    gt: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.sal = np.asarray(self.sal, dtype=np.float64)
        gt = np.asarray(self.gt)
        if self.sal.shape != gt.shape:
            raise ValueError(f"{self.id or 'pair'}: saliency shape {self.sal.shape} != ground truth {gt.shape}")
        if gt.dtype != bool:
            if not np.all((gt == 0) | (gt == 1)):
                raise ValueError(f"{self.id or 'pair'}: ground truth must be binary")
            gt = gt.astype(bool)
        self.gt = gt


def _as_pairs(pairs) -> list[EvalPair]:
    out = [p if isinstance(p, EvalPair) else EvalPair(*p) for p in pairs]
    if not out:
        raise ValueError("no evaluation pairs given")
    return out


def threshold_counts(sal: np.ndarray, gt: np.ndarray):
    """Predicted-positive and true-positive counts at each of the 256 thresholds."""
    s = np.sort(sal.ravel())
    n_pred = s.size - np.searchsorted(s, THRESHOLDS, side="left")
    sp = np.sort(sal[gt].ravel())
    tp = sp.size - np.searchsorted(sp, THRESHOLDS, side="left")
    return n_pred, tp


def _pr(n_pred, tp, n_pos):
    precision = np.ones(len(n_pred))
    has = n_pred > 0
    precision[has] = tp[has] / n_pred[has]
    recall = tp / n_pos
    return precision, recall


def image_pr(sal, gt):
    """Per-image precision and recall at the 256 thresholds."""
    n_pred, tp = threshold_counts(sal, gt)
    return _pr(n_pred, tp, int(gt.sum()))


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def rows(self):
        return zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist())


def pr_curve(pairs) -> PrCurve:
    pairs = [p for p in _as_pairs(pairs) if p.gt.any()]
    if not pairs:
        raise ValueError("pr_curve: no image has a positive ground-truth pixel")
    curves = [image_pr(p.sal, p.gt) for p in pairs]
    precision = np.mean([c[0] for c in curves], axis=0)
    recall = np.mean([c[1] for c in curves], axis=0)
    return PrCurve(THRESHOLDS.copy(), precision, recall)


def f_measure(precision, recall, eta2: float = ETA2):
    """Weighted harmonic mean of precision and recall; 0 where undefined."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    num = (1 + eta2) * p * r
    den = eta2 * p + r
    safe = np.where(den > 0, den, 1.0)
    out = np.where(den > 0, num / safe, 0.0)
    return float(out) if out.ndim == 0 else out


def adaptive_threshold(sal) -> float:
    return min(2.0 * float(np.mean(sal)), 1.0)


def image_f_adaptive(sal, gt) -> float:
    t = adaptive_threshold(sal)
    pred = sal >= t
    n_pred = int(pred.sum())
    tp = int((pred & gt).sum())
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / int(gt.sum())
    return f_measure(precision, recall)


def mean_f_adaptive(pairs) -> float:
    pairs = [p for p in _as_pairs(pairs) if p.gt.any()]
    if not pairs:
        raise ValueError("mean_f_adaptive: no image has a positive ground-truth pixel")
    return float(np.mean([image_f_adaptive(p.sal, p.gt) for p in pairs]))


def image_mae(sal, gt) -> float:
    return float(np.mean(np.abs(sal - gt)))


def mae(pairs) -> float:
    return float(np.mean([image_mae(p.sal, p.gt) for p in _as_pairs(pairs)]))


def _trapezoid(x, y) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def _ranking_ok(gt) -> bool:
    return bool(gt.any()) and not bool(gt.all())


def image_auc(sal, gt) -> float | None:
    """Trapezoidal ROC area over the 256 thresholds plus (0,0) and (1,1)."""
    if not _ranking_ok(gt):
        return None
    n_pred, tp = threshold_counts(sal, gt)
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    tpr = tp / n_pos
    fpr = (n_pred - tp) / n_neg
    # thresholds in decreasing order give increasing rates
    x = np.concatenate([[0.0], fpr[::-1], [1.0]])
    y = np.concatenate([[0.0], tpr[::-1], [1.0]])
    return _trapezoid(x, y)


def image_ap(sal, gt) -> float | None:
    """Area under the PR curve (recall on x) over the 256 thresholds.

    Thresholds with no predicted positives carry no PR point and are dropped;
    the curve starts at recall 0 with the precision of its first point.
    """
    if not _ranking_ok(gt):
        return None
    n_pred, tp = threshold_counts(sal, gt)
    keep = n_pred[::-1] > 0
    n_pred, tp = n_pred[::-1][keep], tp[::-1][keep]
    precision = tp / n_pred
    recall = tp / int(gt.sum())
    x = np.concatenate([[0.0], recall])
    y = np.concatenate([[precision[0]], precision])
    return _trapezoid(x, y)


def _mean_ranked(pairs, fn, name) -> float:
    vals = [v for v in (fn(p.sal, p.gt) for p in _as_pairs(pairs)) if v is not None]
    if not vals:
        raise ValueError(f"{name}: every ground truth is degenerate (all positive or all negative)")
    return float(np.mean(vals))


def roc_auc(pairs) -> float:
    return _mean_ranked(pairs, image_auc, "roc_auc")


def average_precision(pairs) -> float:
    return _mean_ranked(pairs, image_ap, "average_precision")


@dataclass
class MetricsReport:
    mF: float
    MAE: float
    AUC: float
    AP: float
    pr: PrCurve
    per_image: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mF": self.mF,
            "MAE": self.MAE,
            "AUC": self.AUC,
            "AP": self.AP,
            "pr_curve": {
                "thresholds": self.pr.thresholds.tolist(),
                "precision": self.pr.precision.tolist(),
                "recall": self.pr.recall.tolist(),
            },
            "per_image": self.per_image,
            "warnings": self.warnings,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_pr_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["threshold", "precision", "recall"])
            for t, p, r in self.pr.rows():
                writer.writerow([repr(t), repr(p), repr(r)])


def evaluate(pairs) -> MetricsReport:
    """All metrics plus a per-image breakdown."""
    pairs = _as_pairs(pairs)
    per_image, warnings = [], []
    for i, p in enumerate(pairs):
        name = p.id or str(i)
        row = {"id": name, "MAE": image_mae(p.sal, p.gt)}
        if p.gt.any():
            row["F_adaptive"] = image_f_adaptive(p.sal, p.gt)
        else:
            warnings.append(f"{name}: empty ground truth, excluded from PR/mF/AUC/AP")
        if _ranking_ok(p.gt):
            row["AUC"] = image_auc(p.sal, p.gt)
            row["AP"] = image_ap(p.sal, p.gt)
        elif p.gt.any():
            warnings.append(f"{name}: ground truth has no negative pixel, excluded from AUC/AP")
        per_image.append(row)
    return MetricsReport(
        mF=mean_f_adaptive(pairs),
        MAE=mae(pairs),
        AUC=roc_auc(pairs),
        AP=average_precision(pairs),
        pr=pr_curve(pairs),
        per_image=per_image,
        warnings=warnings,
    )
