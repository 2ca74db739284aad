"""Confusion-matrix metrics and the paired t-test.

Per-class metrics with a 0/0 denominator are reported as NaN ("undefined")
and excluded from macro averages rather than counted as zero, so absent
classes do not drag the summary down. The two-sided t-test p-value is
evaluated through the regularized incomplete beta function (continued
fraction), accurate to well below 1e-6.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError


@dataclass
class ConfusionMatrix:
    """Counts[t][p] = samples of true class t predicted as p."""

    counts: np.ndarray
    class_names: Optional[list] = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got {self.counts.shape}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true, y_pred, num_classes: int, class_names: Optional[list] = None) -> ConfusionMatrix:
    """Tally a confusion matrix; labels must lie in [0, num_classes)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"label arrays differ in shape: {y_true.shape} vs {y_pred.shape}")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"{name} labels outside [0, {num_classes}): "
                            f"range [{arr.min()}, {arr.max()}]")
    flat = y_true * num_classes + y_pred
    counts = np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts, class_names)


@dataclass
class MetricsReport:
    """Overall and per-class metrics; NaN marks an undefined (0/0) cell."""

    accuracy: float
    macro_f1: float
    sensitivity: np.ndarray
    ppv: np.ndarray
    npv: np.ndarray
    per_class_accuracy: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    class_names: Optional[list] = None

    def to_dict(self) -> dict:
        def listify(a):
            return [None if math.isnan(v) else float(v) for v in a]

        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "sensitivity": listify(self.sensitivity),
            "ppv": listify(self.ppv),
            "npv": listify(self.npv),
            "per_class_accuracy": listify(self.per_class_accuracy),
            "f1": listify(self.f1),
            "support": [int(s) for s in self.support],
            "class_names": self.class_names,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        """One row per class plus a summary row; undefined cells are empty."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "support", "sensitivity", "ppv", "npv", "accuracy", "f1"])

        def cell(v):
            return "" if math.isnan(v) else f"{v:.6f}"

        for k in range(len(self.sensitivity)):
            name = self.class_names[k] if self.class_names else str(k)
            writer.writerow(
                [name, int(self.support[k]), cell(self.sensitivity[k]), cell(self.ppv[k]),
                 cell(self.npv[k]), cell(self.per_class_accuracy[k]), cell(self.f1[k])]
            )
        writer.writerow(["__summary__", int(self.support.sum()), "", "", "",
                         f"{self.accuracy:.6f}", f"{self.macro_f1:.6f}"])
        return buf.getvalue()


def report(cm: ConfusionMatrix) -> MetricsReport:
    """Derive accuracy, macro-F1 and per-class sensitivity/PPV/NPV from a
    confusion matrix.

    For class k with TP = counts[k][k]: sensitivity = TP/(TP+FN),
    PPV = TP/(TP+FP), NPV = TN/(TN+FN), class accuracy = (TP+TN)/total and
    F1 = 2*PPV*Sens/(PPV+Sens). A metric whose denominator is 0 is NaN;
    F1 with defined but all-zero inputs is 0. Macro-F1 averages defined
    classes only.
    """
    total = cm.total
    if total <= 0:
        raise DataError("cannot compute metrics for an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    tn = total - tp - fn - fp

    def ratio(num, den):
        out = np.full_like(num, np.nan, dtype=np.float64)
        mask = den > 0
        out[mask] = num[mask] / den[mask]
        return out

    sens = ratio(tp, tp + fn)
    ppv = ratio(tp, tp + fp)
    npv = ratio(tn, tn + fn)
    acc_k = (tp + tn) / total
    f1 = np.full_like(sens, np.nan)
    defined = ~np.isnan(sens) & ~np.isnan(ppv)
    both = sens[defined] + ppv[defined]
    f1_vals = np.zeros_like(both)
    nz = both > 0
    f1_vals[nz] = 2.0 * (sens[defined][nz] * ppv[defined][nz]) / both[nz]
    f1[defined] = f1_vals
    macro_f1 = float(np.nanmean(f1)) if defined.any() else float("nan")
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        macro_f1=macro_f1,
        sensitivity=sens,
        ppv=ppv,
        npv=npv,
        per_class_accuracy=acc_k,
        f1=f1,
        support=cm.counts.sum(axis=1),
        class_names=cm.class_names,
    )


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T_df| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_t_test(a, b):
    """Classic paired t-test on d = a - b.

    Returns (t, two-sided p). Degenerate conventions: all differences zero
    yields (0.0, 1.0); zero variance with a nonzero mean yields
    (+/-inf, 0.0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"paired samples must be 1-D and aligned, got {a.shape} vs {b.shape}")
    n = len(a)
    if n < 2:
        raise DataError(f"paired t-test needs n >= 2, got {n}")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), float(student_t_two_sided_p(t, n - 1))
