"""Evaluation suite: per-class binary accuracy and F1, overall non-weighted
mean accuracy, overall weighted F1 (weights = per-class positive support),
and exact-match accuracy for the 7-class task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import EMOTIONS
from .errors import ContractError
from .tensor import _sigmoid_stable


def confusion(preds, labels) -> tuple[int, int, int, int]:
    """Exact (tp, fp, tn, fn) counts over {0,1} vectors."""
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ContractError(f"length mismatch: preds {p.shape} vs labels {y.shape}")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, fp, tn, fn


def binary_accuracy(tp: int, fp: int, tn: int, fn: int) -> float:
    n = tp + fp + tn + fn
    if n == 0:
        raise ContractError("accuracy of an empty prediction set")
    return (tp + tn) / n


def precision(tp: int, fp: int) -> float:
    return tp / (tp + fp) if tp + fp > 0 else 0.0


def recall(tp: int, fn: int) -> float:
    return tp / (tp + fn) if tp + fn > 0 else 0.0


def f1(tp: int, fp: int, fn: int) -> float:
    """2tp / (2tp + fp + fn); defined as 0 when the denominator is 0."""
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def multiclass_accuracy(preds, labels, num_classes: int = 7) -> float:
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ContractError(f"length mismatch: preds {p.shape} vs labels {y.shape}")
    if p.size == 0:
        raise ContractError("accuracy of an empty prediction set")
    for arr in (p, y):
        if np.any(arr < 0) or np.any(arr >= num_classes):
            raise ContractError(f"class id out of range [0, {num_classes})")
    return int(np.sum(p == y)) / p.size


@dataclass
class ClassMetrics:
    label: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    support: float

    def to_dict(self) -> dict:
        return {"label": self.label, "accuracy": self.accuracy,
                "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "support": self.support}


@dataclass
class MetricsReport:
    task_kind: str
    split: str
    seed: int | None
    per_class: list[ClassMetrics] = field(default_factory=list)
    overall: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task_kind": self.task_kind, "split": self.split,
                "seed": self.seed,
                "per_class": [c.to_dict() for c in self.per_class],
                "overall": dict(self.overall)}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    def text_table(self) -> str:
        """Aligned A/F1 table, one column per class plus Overall."""
        headers = [c.label.capitalize() for c in self.per_class]
        cells = [f"{100 * c.accuracy:.1f}/{100 * c.f1:.1f}" for c in self.per_class]
        if "mean_accuracy" in self.overall:
            headers.append("Overall")
            cells.append(f"{100 * self.overall['mean_accuracy']:.1f}/"
                         f"{100 * self.overall['weighted_f1']:.1f}")
        elif "accuracy" in self.overall:
            headers.append("Overall")
            cells.append(f"{100 * self.overall['accuracy']:.1f}")
        width = [max(len(h), len(c)) for h, c in zip(headers, cells)]
        head = " | ".join(h.ljust(w) for h, w in zip(headers, width))
        body = " | ".join(c.ljust(w) for c, w in zip(cells, width))
        title = f"task={self.task_kind} split={self.split}"
        if self.seed is not None:
            title += f" seed={self.seed}"
        return f"{title}\n{head}\n{body}"


def emotion_report(logits: np.ndarray, labels: np.ndarray,
                   threshold: float = 0.5, split: str = "",
                   seed: int | None = None) -> MetricsReport:
    """Per-emotion accuracy/F1 on sigmoid(logit) > threshold decisions.

    mean_accuracy is the unweighted mean of the six accuracies; weighted_f1
    weighs each class F1 by its positive support in the evaluated split.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape != labels.shape or logits.ndim != 2 \
            or logits.shape[1] != len(EMOTIONS):
        raise ContractError(
            f"expected [N, {len(EMOTIONS)}] logits/labels, got "
            f"{logits.shape} and {labels.shape}")
    preds = (_sigmoid_stable(logits) > threshold).astype(np.int64)
    per_class = []
    for c, label in enumerate(EMOTIONS):
        tp, fp, tn, fn = confusion(preds[:, c], labels[:, c])
        per_class.append(ClassMetrics(
            label=label, accuracy=binary_accuracy(tp, fp, tn, fn),
            precision=precision(tp, fp), recall=recall(tp, fn),
            f1=f1(tp, fp, fn), support=float(tp + fn)))
    mean_acc = sum(c.accuracy for c in per_class) / len(per_class)
    total_support = sum(c.support for c in per_class)
    if total_support > 0:
        weighted = sum(c.support * c.f1 for c in per_class) / total_support
    else:
        weighted = 0.0
    return MetricsReport(task_kind="multilabel-6", split=split, seed=seed,
                         per_class=per_class,
                         overall={"mean_accuracy": mean_acc,
                                  "weighted_f1": weighted})


def binary_report(logits: np.ndarray, labels: np.ndarray,
                  threshold: float = 0.5, split: str = "",
                  seed: int | None = None) -> MetricsReport:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    preds = (_sigmoid_stable(logits) > threshold).astype(np.int64)
    tp, fp, tn, fn = confusion(preds, labels)
    cm = ClassMetrics(label="positive",
                      accuracy=binary_accuracy(tp, fp, tn, fn),
                      precision=precision(tp, fp), recall=recall(tp, fn),
                      f1=f1(tp, fp, fn), support=float(tp + fn))
    return MetricsReport(task_kind="binary", split=split, seed=seed,
                         per_class=[cm], overall={"accuracy": cm.accuracy})


def multiclass_report(logits: np.ndarray, labels: np.ndarray, split: str = "",
                      seed: int | None = None) -> MetricsReport:
    logits = np.asarray(logits, dtype=np.float64)
    preds = np.argmax(logits, axis=1)
    acc = multiclass_accuracy(preds, labels, num_classes=logits.shape[1])
    return MetricsReport(task_kind="multiclass-7", split=split, seed=seed,
                         per_class=[],
                         overall={"accuracy": acc})


def early_stop_metric(report: MetricsReport) -> float:
    """Weighted F1 for the emotion task, accuracy otherwise."""
    if report.task_kind == "multilabel-6":
        return report.overall["weighted_f1"]
    return report.overall["accuracy"]


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Arithmetic mean of every metric across runs; per-run reports survive."""
    if not reports:
        raise ContractError("no reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if r.task_kind != first.task_kind or len(r.per_class) != len(first.per_class):
            raise ContractError("cannot aggregate reports of different shapes")
    n = len(reports)
    per_class = []
    for i, base in enumerate(first.per_class):
        per_class.append(ClassMetrics(
            label=base.label,
            accuracy=sum(r.per_class[i].accuracy for r in reports) / n,
            precision=sum(r.per_class[i].precision for r in reports) / n,
            recall=sum(r.per_class[i].recall for r in reports) / n,
            f1=sum(r.per_class[i].f1 for r in reports) / n,
            support=sum(r.per_class[i].support for r in reports) / n))
    overall = {k: sum(r.overall[k] for r in reports) / n for k in first.overall}
    return MetricsReport(task_kind=first.task_kind,
                         split=f"mean-of-{n}", seed=None,
                         per_class=per_class, overall=overall)
