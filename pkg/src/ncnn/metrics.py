"""
Classification metrics, paired t-test, reliability curves and ECE.

Bins split [0, 1] into ``K`` equal intervals ``[k/K, (k+1)/K)`` with the last
one closed. A bin's confidence coordinate is the mean confidence of its
members, not the bin centre. Per-bin sums use ``math.fsum`` so results do not
depend on record order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .errors import ContractError
from .labels import CLASSES, PAIN


@dataclass(frozen=True)
class PredictionRecord:
    confidence_pain: float
    true_label: str
    fold: int = 0
    subject_id: str = ""
    key: str = ""

    def __post_init__(self):
        if not 0.0 <= self.confidence_pain <= 1.0:
            raise ContractError(f"confidence {self.confidence_pain} outside [0, 1]")
        if self.true_label not in CLASSES:
            raise ContractError(f"unknown label {self.true_label!r}")


@dataclass
class ClassificationMetrics:
    accuracy: float
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    undefined: list = field(default_factory=list)  # metrics whose denominator was zero

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def classification_metrics(records, threshold: float = 0.5) -> ClassificationMetrics:
    """Accuracy, F1, precision and recall with pain as the positive class."""
    records = list(records)
    if not records:
        raise ContractError("classification_metrics needs at least one record")
    tp = fp = fn = tn = 0
    for r in records:
        predicted = r.confidence_pain >= threshold
        actual = r.true_label == PAIN
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    undefined = []
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return ClassificationMetrics((tp + tn) / len(records), f1, precision, recall, tp, fp, fn, tn, undefined)


@dataclass
class TTestResult:
    t_statistic: float
    p_value: float
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on ``a - b`` with ``n - 1`` degrees of freedom.

    Zero-variance differences are handled explicitly: all-zero gives ``t = 0,
    p = 1``; a constant nonzero shift gives ``t = +/-inf, p = 0`` flagged as
    degenerate.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("paired samples must be 1-D and equally long")
    n = a.size
    if n < 2:
        raise ContractError("paired t-test needs at least two pairs")
    d = a - b
    mean = math.fsum(d) / n
    sd = math.sqrt(math.fsum((d - mean) ** 2) / (n - 1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0)
        return TTestResult(math.copysign(math.inf, mean), 0.0, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(t, float(min(1.0, p)))


# ---------------------------------------------------------------------------
# calibration


def bin_index(confidence: float, k: int = 10) -> int:
    """Index of the interval ``[i/k, (i+1)/k)`` holding ``confidence`` (last bin closed)."""
    i = min(int(math.floor(confidence * k)), k - 1)
    # floor(c*k) can land one off when c*k rounds across an integer
    if i > 0 and confidence < i / k:
        i -= 1
    elif i < k - 1 and confidence >= (i + 1) / k:
        i += 1
    return i


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    frequency: float


@dataclass
class CalibrationReport:
    bins: list
    ece: float
    k: int
    total: int
    per_fold_ece: dict = field(default_factory=dict)

    def curve(self):
        """Occupied bins as ``(mean_confidence, frequency, count)`` triples."""
        return [(b.mean_confidence, b.frequency, b.count) for b in self.bins if b.count > 0]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _check(records):
    records = list(records)
    if not records:
        raise ContractError("calibration needs at least one record")
    return records


def _bins(records, k):
    conf = [[] for _ in range(k)]
    hits = [[] for _ in range(k)]
    for r in records:
        i = bin_index(r.confidence_pain, k)
        conf[i].append(r.confidence_pain)
        hits[i].append(1.0 if r.true_label == PAIN else 0.0)
    out = []
    for i in range(k):
        n = len(conf[i])
        mean = math.fsum(conf[i]) / n if n else 0.0
        freq = math.fsum(hits[i]) / n if n else 0.0
        out.append(CalibrationBin(i / k, (i + 1) / k, n, mean, freq))
    return out


def ece_from_bins(bins, total: int) -> float:
    return math.fsum(b.count / total * abs(b.frequency - b.mean_confidence) for b in bins if b.count)


def calibration_curve(records, k: int = 10) -> CalibrationReport:
    records = _check(records)
    bins = _bins(records, k)
    report = CalibrationReport(bins, ece_from_bins(bins, len(records)), k, len(records))
    folds = sorted({r.fold for r in records})
    if len(folds) > 1:
        report.per_fold_ece = {str(f): ece([r for r in records if r.fold == f], k) for f in folds}
    return report


def ece(records, k: int = 10) -> float:
    """Count-weighted mean of ``|frequency - mean confidence|`` over bins."""
    records = _check(records)
    return ece_from_bins(_bins(records, k), len(records))


def confidence_histogram(records, k: int = 10) -> list:
    records = _check(records)
    counts = [0] * k
    for r in records:
        counts[bin_index(r.confidence_pain, k)] += 1
    return counts


# ---------------------------------------------------------------------------
# report files


def write_curve_csv(report: CalibrationReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "lower", "upper", "count", "mean_confidence", "frequency"])
        for i, b in enumerate(report.bins):
            if b.count:
                w.writerow([i + 1, repr(b.lower), repr(b.upper), b.count, repr(b.mean_confidence), repr(b.frequency)])


def write_histogram_csv(counts, path, k: Optional[int] = None) -> None:
    k = k or len(counts)
    total = sum(counts)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "lower", "upper", "count", "fraction"])
        for i, c in enumerate(counts):
            w.writerow([i + 1, repr(i / k), repr((i + 1) / k), c, repr(c / total if total else 0.0)])


def write_records(records, path) -> None:
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_records(path) -> list:
    with Path(path).open() as fh:
        return [PredictionRecord(**json.loads(line)) for line in fh if line.strip()]
