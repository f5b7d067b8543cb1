"""
Binary and multi-class open-set metrics.

The confusion matrix puts predictions on rows and ground truth on columns,
with labels ordered benign, known attacks, unknown attack. Ground-truth
labels outside the known set collapse to the unknown-attack label.

Weighted precision/recall use each label's ground-truth support as its
weight and divide by the total number of flows, which makes them ordinary
support-weighted averages. A metric whose denominator is empty is reported
as ``None`` (rendered "undefined"), never as zero. Every metric is computed
as an exact fraction and rounded to float once, so results do not depend on
summation order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .flows import BENIGN
from .pipeline import UNKNOWN_ATTACK

UNDEFINED = "undefined"


def _ratio(num, den):
    return None if den == 0 else Fraction(int(num), int(den))


def _f1(p, r):
    if p is None or r is None:
        return None
    return Fraction(0) if p + r == 0 else 2 * p * r / (p + r)


def _float(x):
    return None if x is None else float(x)


@dataclass
class ConfusionMatrix:
    labels: list[str]
    counts: np.ndarray  # [predicted, truth]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def normalized(self) -> np.ndarray:
        """Each ground-truth column divided by its sum; empty columns are NaN."""
        col = self.counts.sum(axis=0, keepdims=True).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(col > 0, self.counts / col, np.nan)


def confusion(predicted: Sequence[str], truth: Sequence[str],
              known_classes: Sequence[str]) -> ConfusionMatrix:
    known = list(known_classes)
    labels = known + [UNKNOWN_ATTACK]
    pos = {name: i for i, name in enumerate(labels)}
    if len(predicted) != len(truth):
        raise ValueError("predicted and truth sequences differ in length")
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in zip(predicted, truth):
        if p not in pos:
            raise ValueError(f"prediction {p!r} is neither a known class nor {UNKNOWN_ATTACK}")
        counts[pos[p], pos.get(t, pos[UNKNOWN_ATTACK])] += 1
    return ConfusionMatrix(labels, counts)


@dataclass
class BinaryMetrics:
    accuracy: float | None
    f1: float | None
    fpr: float | None
    precision: float | None = None
    recall: float | None = None


@dataclass
class MultiMetrics:
    unknown_recall: float | None
    weighted_precision: float | None
    weighted_recall: float | None
    weighted_f1: float | None


def binary_counts(cm: ConfusionMatrix, benign: str = BENIGN) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) with any attack, known or unknown, as the positive class."""
    attack = np.array([lab != benign for lab in cm.labels])
    c = cm.counts
    tp = int(c[np.ix_(attack, attack)].sum())
    fp = int(c[np.ix_(attack, ~attack)].sum())
    fn = int(c[np.ix_(~attack, attack)].sum())
    tn = int(c[np.ix_(~attack, ~attack)].sum())
    return tp, fp, fn, tn


def binary_metrics(cm: ConfusionMatrix, benign: str = BENIGN) -> BinaryMetrics:
    tp, fp, fn, tn = binary_counts(cm, benign)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return BinaryMetrics(
        accuracy=_float(_ratio(tp + tn, tp + fp + fn + tn)),
        f1=_float(_f1(precision, recall)),
        fpr=_float(_ratio(fp, fp + tn)),
        precision=_float(precision),
        recall=_float(recall),
    )


def per_class(cm: ConfusionMatrix):
    """Per-label (precision, recall, support) with exact fractions."""
    c = cm.counts
    diag = np.diag(c)
    predicted = c.sum(axis=1)
    support = c.sum(axis=0)
    return [(_ratio(diag[i], predicted[i]), _ratio(diag[i], support[i]), int(support[i]))
            for i in range(len(cm.labels))]


def multi_metrics(cm: ConfusionMatrix) -> MultiMetrics:
    u = cm.index(UNKNOWN_ATTACK)
    unknown_recall = _ratio(cm.counts[u, u], cm.counts[:, u].sum())
    rows = [r for r in per_class(cm) if r[2] > 0]
    total = cm.total
    if total == 0:
        return MultiMetrics(unknown_recall, None, None, None)
    if any(p is None for p, _, _ in rows):
        p_wht = None
    else:
        p_wht = sum(w * p for p, _, w in rows) / total
    r_wht = sum(w * r for _, r, w in rows) / total
    return MultiMetrics(_float(unknown_recall), _float(p_wht), _float(r_wht),
                        _float(_f1(p_wht, r_wht)))


def known_class_accuracy(cm: ConfusionMatrix) -> float | None:
    """Fraction of flows from known classes given exactly their own label."""
    u = cm.index(UNKNOWN_ATTACK)
    known = [i for i in range(len(cm.labels)) if i != u]
    return _float(_ratio(sum(cm.counts[i, i] for i in known), cm.counts[:, known].sum()))


def _fmt(x):
    return UNDEFINED if x is None else f"{x:.6f}"


def format_report(cm: ConfusionMatrix, benign: str = BENIGN) -> str:
    b = binary_metrics(cm, benign)
    m = multi_metrics(cm)
    lines = [
        "[binary]",
        f"ACC = {_fmt(b.accuracy)}",
        f"F1 = {_fmt(b.f1)}",
        f"FPR = {_fmt(b.fpr)}",
        "",
        "[multi]",
        f"R_unk = {_fmt(m.unknown_recall)}",
        f"P_wht = {_fmt(m.weighted_precision)}",
        f"R_wht = {_fmt(m.weighted_recall)}",
        f"F1_wht = {_fmt(m.weighted_f1)}",
        f"known_accuracy = {_fmt(known_class_accuracy(cm))}",
        f"flows = {cm.total}",
        "",
        "[confusion] rows = predicted, columns = ground truth",
    ]
    width = max(len(s) for s in cm.labels) + 2
    header = " " * width + "".join(f"{lab:>{width}}" for lab in cm.labels)
    lines.append(header)
    for lab, row in zip(cm.labels, cm.counts):
        lines.append(f"{lab:<{width}}" + "".join(f"{v:>{width}d}" for v in row))
    lines += ["", "[confusion_normalized] each column sums to 1", header]
    for lab, row in zip(cm.labels, cm.normalized()):
        cells = "".join(f"{UNDEFINED if np.isnan(v) else f'{v:.4f}':>{width}}" for v in row)
        lines.append(f"{lab:<{width}}" + cells)
    return "\n".join(lines) + "\n"


def report_csv(cm: ConfusionMatrix, benign: str = BENIGN) -> str:
    b = binary_metrics(cm, benign)
    m = multi_metrics(cm)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "name", "value"])
    for name, val in [("ACC", b.accuracy), ("F1", b.f1), ("FPR", b.fpr),
                      ("R_unk", m.unknown_recall), ("P_wht", m.weighted_precision),
                      ("R_wht", m.weighted_recall), ("F1_wht", m.weighted_f1),
                      ("known_accuracy", known_class_accuracy(cm))]:
        w.writerow(["metric", name, UNDEFINED if val is None else repr(val)])
    for i, pred in enumerate(cm.labels):
        for j, truth in enumerate(cm.labels):
            w.writerow(["confusion", f"{pred}|{truth}", int(cm.counts[i, j])])
    return buf.getvalue()
