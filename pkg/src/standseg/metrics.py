"""Hard-label agreement metrics on a population confusion matrix.

Orientation: rows are predicted classes, columns are reference classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .raster import DEFAULT_SCHEME, UNLABELED, ClassScheme, Raster


@dataclass(eq=False)
class ConfusionMatrix:
    """N x N counts (or proportions).

    ``row_totals``, ``col_totals`` and ``total`` default to sums of the cells.
    They can be set explicitly when the cells come from a rounded published
    table whose printed margins are more accurate than re-summed cells.
    """

    counts: np.ndarray
    row_totals: np.ndarray | None = None
    col_totals: np.ndarray | None = None
    total: float | None = None

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0):
            raise InputError("confusion matrix counts must be non-negative")
        self.counts = c

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    def predicted_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1) if self.row_totals is None else np.asarray(self.row_totals, float)

    def reference_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0) if self.col_totals is None else np.asarray(self.col_totals, float)

    def grand_total(self) -> float:
        return float(self.counts.sum()) if self.total is None else float(self.total)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n != self.n:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(predicted, reference, n: int, ignore: int | None = UNLABELED) -> ConfusionMatrix:
    """Tally ``counts[pred, ref]`` over pixels; reference pixels equal to ``ignore`` are skipped."""
    p = np.asarray(predicted.data if isinstance(predicted, Raster) else predicted)
    r = np.asarray(reference.data if isinstance(reference, Raster) else reference)
    if p.shape != r.shape:
        raise ShapeError(f"predicted {p.shape} and reference {r.shape} differ in shape")
    p, r = p.ravel().astype(np.int64), r.ravel().astype(np.int64)
    if ignore is not None:
        keep = r != ignore
        p, r = p[keep], r[keep]
    if p.size and (p.min() < 0 or p.max() >= n or r.min() < 0 or r.max() >= n):
        raise InputError(f"class ids must lie in 0..{n - 1}")
    counts = np.bincount(p * n + r, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(counts)


def normalize_matrix(m: ConfusionMatrix) -> np.ndarray:
    total = m.counts.sum()
    if total <= 0:
        raise InputError("cannot normalise an empty confusion matrix")
    return m.counts / float(total)


def overall_accuracy(m: ConfusionMatrix) -> float:
    return float(np.trace(m.counts)) / m.grand_total()


def producers_accuracy(m: ConfusionMatrix, i: int) -> float | None:
    """Diagonal over the reference (column) total; None when that total is 0."""
    col = float(m.reference_totals()[i])
    return None if col == 0 else float(m.counts[i, i]) / col


def users_accuracy(m: ConfusionMatrix, i: int) -> float | None:
    """Diagonal over the predicted (row) total; None when that total is 0."""
    row = float(m.predicted_totals()[i])
    return None if row == 0 else float(m.counts[i, i]) / row


def mcc_binary(tp: float, tn: float, fp: float, fn: float) -> float:
    """Matthews correlation; 0 whenever a marginal in the denominator is 0."""
    tp, tn, fp, fn = float(tp), float(tn), float(fp), float(fn)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0.0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(den)


def one_vs_rest(m: ConfusionMatrix, i: int) -> tuple[float, float, float, float]:
    """(TP, TN, FP, FN) for class ``i`` against all others."""
    tp = float(m.counts[i, i])
    fp = float(m.predicted_totals()[i]) - tp
    fn = float(m.reference_totals()[i]) - tp
    tn = m.grand_total() - tp - fp - fn
    return tp, tn, fp, fn


def class_mcc(m: ConfusionMatrix, i: int) -> float:
    return mcc_binary(*one_vs_rest(m, i))


def macro_mcc(m: ConfusionMatrix) -> float:
    if m.n < 2:
        raise InputError("macro MCC needs at least two classes")
    return sum(class_mcc(m, i) for i in range(m.n)) / m.n


def metrics_report(m: ConfusionMatrix, scheme: ClassScheme = DEFAULT_SCHEME) -> dict:
    """JSON-ready summary: oa, mmcc, per-class pa/ua/mcc, normalised matrix."""
    labels = scheme.labels if scheme.n == m.n else tuple(str(i) for i in range(m.n))
    return {
        "oa": overall_accuracy(m),
        "mmcc": macro_mcc(m),
        "per_class": [
            {
                "class": labels[i],
                "pa": producers_accuracy(m, i),
                "ua": users_accuracy(m, i),
                "mcc": class_mcc(m, i),
            }
            for i in range(m.n)
        ],
        "matrix_normalized": normalize_matrix(m).tolist(),
    }
