"""Ranking and confusion-count metrics for multi-label and single-label tasks.

AUC numerators are accumulated in integers (doubled, so half-credit ties
stay integral) and divided once, which makes the rank-sum and the
trapezoidal routes agree to the last bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    return y.astype(bool)


def roc_auc(scores, labels) -> float | None:
    """P(random positive outranks random negative), ties counted half.

    Returns None when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # twice the midrank of each tie block: first + last (1-based)
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
    ends = np.r_[starts[1:], s.size]
    twice_rank = np.empty(s.size, dtype=np.int64)
    twice_rank[order] = np.repeat(starts + 1 + ends, ends - starts)
    twice_u = int(twice_rank[y].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Integer (false-positive, true-positive) counts at each distinct threshold, from (0, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[cut]
    fp = (cut + 1) - tp
    return np.r_[0, fp].astype(np.int64), np.r_[0, tp].astype(np.int64)


def auc_trapezoid(scores, labels) -> float | None:
    fp, tp = roc_curve(scores, labels)
    n_neg, n_pos = int(fp[-1]), int(tp[-1])
    if n_pos == 0 or n_neg == 0:
        return None
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * n_pos * n_neg)


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def precision_recall_f1(counts: ClassCounts) -> tuple[float, float, float]:
    """Per-class precision, recall and their harmonic mean; 0/0 is taken as 0."""
    p = _ratio(counts.tp, counts.tp + counts.fp)
    r = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def accuracy(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ContractError(f"accuracy: {pred.shape} predictions vs {true.shape} targets")
    if pred.size == 0:
        raise ContractError("accuracy of an empty set")
    return float(np.count_nonzero(pred == true) / pred.size)


def confusion_counts(pred: np.ndarray, labels: np.ndarray) -> list[ClassCounts]:
    pred, labels = pred.astype(bool), labels.astype(bool)
    return [
        ClassCounts(int(np.sum(pred[:, c] & labels[:, c])), int(np.sum(pred[:, c] & ~labels[:, c])),
                    int(np.sum(~pred[:, c] & labels[:, c])), int(np.sum(~pred[:, c] & ~labels[:, c])))
        for c in range(labels.shape[1])
    ]


@dataclass
class EvalResult:
    class_names: list[str]
    per_class_auc: list[float | None]
    macro_auc: float | None
    accuracy: float | None
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_precision: float | None
    macro_recall: float | None
    macro_f1: float | None
    counts: list[dict]
    skipped_classes: list[str] = field(default_factory=list)
    num_records: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _mean(values) -> float | None:
    return float(np.mean(values)) if values else None


def evaluate(logits, labels, class_names: Sequence[str] | None = None, threshold: float = 0.0) -> EvalResult:
    """Metrics over records; ``logits`` and ``labels`` are (N, C).

    Single-label tasks (exactly one positive per record) predict by argmax and
    report accuracy; multi-label tasks threshold each logit and leave
    accuracy as None.  Classes without both positives and negatives are
    excluded from every macro average and listed in ``skipped_classes``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = _binary(labels)
    if z.shape != y.shape or z.ndim != 2:
        raise ContractError(f"logits {z.shape} and labels {y.shape} must be equal (N, C) arrays")
    n, c = y.shape
    names = list(class_names) if class_names is not None else [str(i) for i in range(c)]
    single_label = bool(n) and (y.sum(axis=1) == 1).all()
    if single_label:
        pred = np.eye(c, dtype=bool)[z.argmax(axis=1)]
        acc = accuracy(z.argmax(axis=1), y.argmax(axis=1))
    else:
        pred = z > threshold
        acc = None
    counts = confusion_counts(pred, y)
    aucs, prs, rcs, f1s, skipped, keep = [], [], [], [], [], []
    for k in range(c):
        auc = roc_auc(z[:, k], y[:, k])
        p, r, f1 = precision_recall_f1(counts[k])
        aucs.append(auc)
        prs.append(p)
        rcs.append(r)
        f1s.append(f1)
        if auc is None:
            skipped.append(names[k])
        else:
            keep.append(k)
    return EvalResult(
        class_names=names, per_class_auc=aucs, macro_auc=_mean([aucs[k] for k in keep]), accuracy=acc,
        precision=prs, recall=rcs, f1=f1s,
        macro_precision=_mean([prs[k] for k in keep]), macro_recall=_mean([rcs[k] for k in keep]),
        macro_f1=_mean([f1s[k] for k in keep]), counts=[asdict(ct) for ct in counts],
        skipped_classes=skipped, num_records=n,
    )
