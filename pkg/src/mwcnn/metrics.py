"""Confusion counts, derived rates and CSV exports."""

import csv
from dataclasses import dataclass

import numpy as np

from mwcnn.model import FS, MW


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp,
                               self.fn + other.fn)


@dataclass(frozen=True)
class Metrics:
    """Rates in [0, 1]; ``None`` where the denominator is zero."""

    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    npv: float


def confusion(predictions, labels):
    """Count outcomes with MW (1) as the positive class."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    if pred.size == 0:
        raise ValueError("no predictions")
    if not np.isin(true, (FS, MW)).all() or not np.isin(pred, (FS, MW)).all():
        raise ValueError("labels and predictions must be 0 (FS) or 1 (MW)")
    return ConfusionCounts(
        tp=int(np.sum((pred == MW) & (true == MW))),
        tn=int(np.sum((pred == FS) & (true == FS))),
        fp=int(np.sum((pred == MW) & (true == FS))),
        fn=int(np.sum((pred == FS) & (true == MW))),
    )


def _ratio(num, den):
    return num / den if den else None


def metrics(counts):
    if counts.total == 0:
        raise ValueError("cannot compute rates from zero samples")
    c = counts
    return Metrics(
        accuracy=(c.tp + c.tn) / c.total,
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
        precision=_ratio(c.tp, c.tp + c.fp),
        npv=_ratio(c.tn, c.tn + c.fn),
    )


def pool_counts(counts):
    counts = list(counts)
    if not counts:
        raise ValueError("nothing to pool")
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return total


def fmt_rate(x):
    return "NA" if x is None else f"{x:.5f}"


REPORT_COLUMNS = ["experiment", "tp", "tn", "fp", "fn", "accuracy", "sensitivity", "specificity",
                  "precision", "npv"]


def report_row(name, counts):
    m = metrics(counts)
    return [name, counts.tp, counts.tn, counts.fp, counts.fn, fmt_rate(m.accuracy),
            fmt_rate(m.sensitivity), fmt_rate(m.specificity), fmt_rate(m.precision), fmt_rate(m.npv)]


def export_report(results, path):
    """``results``: iterable of ``(experiment_name, ConfusionCounts)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for name, counts in results:
            w.writerow(report_row(name, counts))


def export_history(histories, path):
    """One row per (repetition, epoch); ``histories`` is a list of TrainHistory."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["repetition", "epoch", "train_loss", "train_acc", "val_acc"])
        for rep, h in enumerate(histories):
            for epoch, (loss, tacc, vacc) in enumerate(zip(h.train_loss, h.train_acc, h.val_acc), 1):
                w.writerow([rep, epoch, f"{loss:.5f}", f"{tacc:.5f}", f"{vacc:.5f}"])


def dump_window_csv(window, path, channel_labels=None):
    """Header row of channel labels, then one row of values per channel (channels x time)."""
    window = np.asarray(window)
    labels = list(channel_labels or [f"ch{i}" for i in range(window.shape[0])])
    if len(labels) != window.shape[0]:
        raise ValueError(f"{len(labels)} labels for {window.shape[0]} channels")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(labels)
        for row in window.astype(np.float32):
            w.writerow([repr(float(v)) for v in row])


def read_window_csv(path):
    """Inverse of :func:`dump_window_csv`; returns ``(window float32, labels)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: not a window CSV (need a header and at least one channel row)")
    labels, body = rows[0], rows[1:]
    if len(body) != len(labels):
        raise ValueError(f"{path}: {len(body)} channel rows for {len(labels)} labels")
    width = len(body[0])
    values = []
    for i, row in enumerate(body, start=2):
        if len(row) != width:
            raise ValueError(f"{path}: row {i} has {len(row)} values, expected {width}")
        try:
            values.append([float(v) for v in row])
        except ValueError:
            raise ValueError(f"{path}: row {i} holds a non-numeric value") from None
    return np.array(values, dtype=np.float32), labels
