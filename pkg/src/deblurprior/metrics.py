"""Evaluation measures: PSNR, kernel similarity, error ratio, accuracy-vs-scale
curves and CSV/SVG report output."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from . import classifier
from .imaging import write_text

PSNR_CAP = 99.0
ERROR_RATIO_CAP = 1e6


def _interior(x, border):
    if border:
        return x[border:-border, border:-border]
    return x


def psnr(a, b, border=0):
    """PSNR in dB for [0, 1] images, ignoring ``border`` pixels on each side."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((_interior(a, border) - _interior(b, border)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def kernel_similarity(k1, k2):
    """Maximum normalized cross-correlation over all integer shifts."""
    k1 = np.asarray(k1, dtype=np.float64)
    k2 = np.asarray(k2, dtype=np.float64)
    n1, n2 = np.linalg.norm(k1), np.linalg.norm(k2)
    if n1 == 0 or n2 == 0:
        return 0.0
    xc = signal.correlate(k1, k2, mode="full", method="direct")
    return float(np.clip(xc.max() / (n1 * n2), 0.0, 1.0))


def ssd(a, b):
    return float(np.sum((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def error_ratio(restored, restored_with_true_kernel, ground_truth):
    """SSD(restored, gt) / SSD(restored with the true kernel, gt).

    A zero denominator returns ``ERROR_RATIO_CAP`` (or 1.0 when the numerator is
    zero too) and emits a RuntimeWarning so callers can flag the row.
    """
    num = ssd(restored, ground_truth)
    den = ssd(restored_with_true_kernel, ground_truth)
    if den == 0:
        warnings.warn("error ratio with zero reference SSD", RuntimeWarning, stacklevel=2)
        return 1.0 if num == 0 else ERROR_RATIO_CAP
    return num / den


def accuracy_curve(model, dataset, scales):
    """[(scale, accuracy)] sorted by scale."""
    return [(float(s), classifier.evaluate_accuracy(model, dataset, s)) for s in sorted(scales)]


def curve_csv(curve, header=("scale", "accuracy")):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in curve:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def save_line_plot(path, series, xlabel, ylabel, title=""):
    """SVG line plot; ``series`` maps label -> [(x, y), ...]."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in series.items():
        xs, ys = zip(*pts) if pts else ((), ())
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    write_text(path, buf.getvalue())


EVAL_COLUMNS = (
    "name", "psnr_blurred", "psnr_restored", "kernel_similarity", "error_ratio",
    "f_clear", "f_blurred", "final_energy", "flag",
)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append({c: row.get(c, "") for c in EVAL_COLUMNS})

    def aggregates(self):
        out = {}
        for c in EVAL_COLUMNS[1:-1]:
            vals = [r[c] for r in self.rows if isinstance(r[c], (int, float)) and not math.isnan(r[c])]
            out[c] = float(np.mean(vals)) if vals else float("nan")
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in EVAL_COLUMNS])
        agg = self.aggregates()
        w.writerow(["mean"] + [_fmt(agg[c]) for c in EVAL_COLUMNS[1:-1]] + [""])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)
