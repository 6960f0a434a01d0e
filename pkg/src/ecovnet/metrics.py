"""Confusion matrix, precision/recall/F1, Wald accuracy intervals and ROC/AUC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ecovnet.errors import ArgumentError, DimensionError


def confusion_matrix(true_labels, pred_labels, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise DimensionError("true and predicted labels must be 1-D and equally long")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ArgumentError(f"{name} label outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass
class ClassCounts:
    tp: int
    fp: int
    fn: int
    tn: int


def class_counts(cm: np.ndarray) -> list[ClassCounts]:
    total = int(cm.sum())
    out = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        out.append(ClassCounts(tp, fp, fn, total - tp - fp - fn))
    return out


def _ratio(num: float, den: float) -> tuple[float, bool]:
    # 0/0 is reported as 0 and flagged
    return (num / den, False) if den else (0.0, True)


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1 in percent."""
    p, _ = _ratio(tp, tp + fp)
    r, _ = _ratio(tp, tp + fn)
    f1, _ = _ratio(2 * p * r, p + r)
    return 100 * p, 100 * r, 100 * f1


def accuracy_ci(correct: int, total: int, z: float = 1.96) -> tuple[float, float]:
    """Accuracy and its Wald half-width, both in percent."""
    if total < 1:
        raise ArgumentError("total must be >= 1")
    acc = correct / total
    return 100 * acc, 100 * wald_halfwidth(acc, total, z)


def wald_halfwidth(acc: float, n: int, z: float = 1.96) -> float:
    return z * math.sqrt(max(acc * (1.0 - acc), 0.0) / n)


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------

def roc_curve(binary_labels, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) sweeping every distinct score from high to low.

    Starts at (0, 0) with an infinite threshold.
    """
    y = np.asarray(binary_labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    cut = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[cut]
    fps = np.cumsum(~y)[cut]
    P, N = int(y.sum()), int((~y).sum())
    tpr = np.r_[0.0, tps / P] if P else np.full(cut.size + 1, np.nan)
    fpr = np.r_[0.0, fps / N] if N else np.full(cut.size + 1, np.nan)
    return fpr, tpr, np.r_[np.inf, s[cut]]


def auc_trapezoid(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr), np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class RocResult:
    fpr: dict[str, np.ndarray]
    tpr: dict[str, np.ndarray]
    auc: dict[str, float | None]  # None where a class never occurs (or always occurs)


def roc_auc(true_labels, scores) -> RocResult:
    """One-vs-rest ROC for each class, plus pooled (micro) and unweighted-mean (macro)."""
    t = np.asarray(true_labels, dtype=np.int64)
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != t.size:
        raise DimensionError("scores must be (samples, classes) and match the labels")
    C = S.shape[1]
    Y = np.eye(C, dtype=bool)[t]
    fprs, tprs, aucs = {}, {}, {}
    for c in range(C):
        key = str(c)
        if Y[:, c].all() or not Y[:, c].any():
            fprs[key], tprs[key], aucs[key] = np.array([]), np.array([]), None
            continue
        fprs[key], tprs[key], _ = roc_curve(Y[:, c], S[:, c])
        aucs[key] = auc_trapezoid(fprs[key], tprs[key])

    fprs["micro"], tprs["micro"], _ = roc_curve(Y.ravel(), S.ravel())
    aucs["micro"] = auc_trapezoid(fprs["micro"], tprs["micro"])

    defined = [str(c) for c in range(C) if aucs[str(c)] is not None]
    if defined:
        grid = np.unique(np.concatenate([fprs[k] for k in defined]))
        mean_tpr = np.mean([np.interp(grid, fprs[k], tprs[k]) for k in defined], axis=0)
        fprs["macro"], tprs["macro"] = grid, mean_tpr
        aucs["macro"] = float(np.mean([aucs[k] for k in defined]))
    else:
        fprs["macro"], tprs["macro"], aucs["macro"] = np.array([]), np.array([]), None
    return RocResult(fprs, tprs, aucs)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    class_names: list[str]
    confusion: np.ndarray
    counts: list[ClassCounts]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    accuracy: float
    ci_halfwidth: float
    roc: RocResult
    degenerate: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_csv(self) -> str:
        names = self.class_names
        lines = ["# confusion (rows=true, cols=predicted)", "true\\pred," + ",".join(names)]
        lines += [f"{n}," + ",".join(str(int(v)) for v in row) for n, row in zip(names, self.confusion)]
        lines += ["", "# per-class", "class,tp,fp,fn,tn,precision,recall,f1,auc"]
        for i, n in enumerate(names):
            k = self.counts[i]
            auc = self.roc.auc[str(i)]
            lines.append(f"{n},{k.tp},{k.fp},{k.fn},{k.tn},{self.precision[i]:.2f},"
                         f"{self.recall[i]:.2f},{self.f1[i]:.2f},{'' if auc is None else f'{auc:.6f}'}")
        lines += ["", "# summary", "metric,value"]
        lines.append(f"samples,{self.total}")
        lines.append(f"accuracy,{self.accuracy:.2f}")
        lines.append(f"ci95_halfwidth,{self.ci_halfwidth:.2f}")
        for k in ("micro", "macro"):
            a = self.roc.auc[k]
            lines.append(f"auc_{k},{'' if a is None else f'{a:.6f}'}")
        if self.degenerate:
            lines.append("zero_denominator," + ";".join(self.degenerate))
        return "\n".join(lines) + "\n"

    def roc_csv(self, key: str) -> str:
        rows = ["fpr,tpr"] + [f"{f:.8g},{t:.8g}" for f, t in zip(self.roc.fpr[key], self.roc.tpr[key])]
        return "\n".join(rows) + "\n"


def evaluate_predictions(true_labels, pred_labels, scores, class_names, z: float = 1.96) -> EvaluationReport:
    C = len(class_names)
    cm = confusion_matrix(true_labels, pred_labels, C)
    counts = class_counts(cm)
    precision, recall, f1, degenerate = [], [], [], []
    for name, k in zip(class_names, counts):
        p, r, f = prf1(k.tp, k.fp, k.fn)
        precision.append(p)
        recall.append(r)
        f1.append(f)
        if k.tp + k.fp == 0:
            degenerate.append(f"{name}:precision")
        if k.tp + k.fn == 0:
            degenerate.append(f"{name}:recall")
    acc, hw = accuracy_ci(int(np.trace(cm)), int(cm.sum()), z)
    return EvaluationReport(list(class_names), cm, counts, precision, recall, f1, acc, hw,
                            roc_auc(true_labels, scores), degenerate)
