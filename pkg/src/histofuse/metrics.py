"""Confusion matrices, AC/SN/SP, per-class recall and report rendering.

Zero-denominator metrics are reported as None and rendered as NA, never
coerced to 0 or 1. Reports are keyed by (task, magnification).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # C x C int64, rows true, cols predicted
    class_order: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class BinaryMetrics:
    ac: float | None
    sn: float | None
    sp: float | None


@dataclass
class CellMetrics:
    task: str  # "binary" or "multiclass"
    magnification: int
    ac: float | None = None
    sn: float | None = None
    sp: float | None = None
    recalls: dict[str, float | None] = field(default_factory=dict)


@dataclass
class MetricsReport:
    cells: dict[tuple[str, int], CellMetrics] = field(default_factory=dict)

    def add(self, cell: CellMetrics) -> None:
        self.cells[(cell.task, cell.magnification)] = cell


def confusion(y_true, y_pred, class_order) -> ConfusionMatrix:
    class_order = tuple(class_order)
    index = {c: i for i, c in enumerate(class_order)}
    if len(y_true) != len(y_pred):
        raise ConfigError("y_true and y_pred lengths differ")
    counts = np.zeros((len(class_order), len(class_order)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        if t not in index or p not in index:
            raise ConfigError(f"unknown class tag in ({t!r}, {p!r})")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(counts=counts, class_order=class_order)


def binary_metrics(cm: ConfusionMatrix,
                   positive: str = "malignant") -> BinaryMetrics:
    """AC / SN / SP from a 2x2 matrix; SN is recall of the positive class."""
    if cm.counts.shape != (2, 2):
        raise ConfigError("binary metrics need a 2x2 confusion matrix")
    if positive not in cm.class_order:
        raise ConfigError(f"positive class {positive!r} not in class order")
    pos = cm.class_order.index(positive)
    neg = 1 - pos
    tp = int(cm.counts[pos, pos])
    fn = int(cm.counts[pos, neg])
    tn = int(cm.counts[neg, neg])
    fp = int(cm.counts[neg, pos])
    n = tp + fn + tn + fp
    ac = (tp + tn) / n if n > 0 else None
    sn = tp / (tp + fn) if (tp + fn) > 0 else None
    sp = tn / (tn + fp) if (tn + fp) > 0 else None
    return BinaryMetrics(ac=ac, sn=sn, sp=sp)


def per_class_recall(cm: ConfusionMatrix) -> list[float | None]:
    out = []
    for i in range(cm.counts.shape[0]):
        row = int(cm.counts[i].sum())
        out.append(int(cm.counts[i, i]) / row if row > 0 else None)
    return out


def multiclass_accuracy(cm: ConfusionMatrix) -> float | None:
    n = cm.total
    return float(np.trace(cm.counts)) / n if n > 0 else None


def _fmt(value: float | None) -> str:
    return "NA" if value is None else f"{value:.6f}"


def render_report(report: MetricsReport, fmt: str = "text") -> str:
    if fmt == "csv":
        return _render_csv(report)
    if fmt == "text":
        return _render_text(report)
    raise ConfigError(f"unknown report format {fmt!r}")


def _render_csv(report: MetricsReport) -> str:
    lines = ["task,magnification,metric,class,value"]
    for (task, mag) in sorted(report.cells):
        cell = report.cells[(task, mag)]
        if task == "binary":
            lines.append(f"binary,{mag},AC,,{_fmt(cell.ac)}")
            lines.append(f"binary,{mag},SN,,{_fmt(cell.sn)}")
            lines.append(f"binary,{mag},SP,,{_fmt(cell.sp)}")
        else:
            lines.append(f"multiclass,{mag},AC,,{_fmt(cell.ac)}")
            for cls, val in cell.recalls.items():
                lines.append(f"multiclass,{mag},recall,{cls},{_fmt(val)}")
    return "\n".join(lines) + "\n"


def _render_text(report: MetricsReport) -> str:
    out = io.StringIO()
    tasks = sorted({task for task, _ in report.cells})
    for task in tasks:
        mags = sorted(m for t, m in report.cells if t == task)
        title = ("Binary classification (benign vs malignant)"
                 if task == "binary" else "Multiclass (subclass) classification")
        out.write(title + "\n")
        header = f"{'metric':<12}" + "".join(f"{str(m) + 'x':>10}" for m in mags)
        out.write(header + "\n")
        if task == "binary":
            rows = [("AC", "ac"), ("SN", "sn"), ("SP", "sp")]
            for label, attr in rows:
                vals = [getattr(report.cells[(task, m)], attr) for m in mags]
                out.write(f"{label:<12}" + "".join(f"{_fmt(v):>10}" for v in vals)
                          + "\n")
        else:
            vals = [report.cells[(task, m)].ac for m in mags]
            out.write(f"{'AC':<12}" + "".join(f"{_fmt(v):>10}" for v in vals) + "\n")
            classes: list[str] = []
            for m in mags:
                for cls in report.cells[(task, m)].recalls:
                    if cls not in classes:
                        classes.append(cls)
            for cls in classes:
                vals = [report.cells[(task, m)].recalls.get(cls) for m in mags]
                out.write(f"{'recall ' + cls:<12}"
                          + "".join(f"{_fmt(v):>10}" for v in vals) + "\n")
        out.write("\n")
    return out.getvalue()


def parse_report_csv(text: str) -> MetricsReport:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != "task,magnification,metric,class,value":
        raise ConfigError("bad report CSV header")
    report = MetricsReport()
    for ln in lines[1:]:
        task, mag_s, metric, cls, value_s = ln.split(",")
        mag = int(mag_s)
        key = (task, mag)
        if key not in report.cells:
            report.cells[key] = CellMetrics(task=task, magnification=mag)
        cell = report.cells[key]
        value = None if value_s == "NA" else float(value_s)
        if metric == "AC":
            cell.ac = value
        elif metric == "SN":
            cell.sn = value
        elif metric == "SP":
            cell.sp = value
        elif metric == "recall":
            cell.recalls[cls] = value
        else:
            raise ConfigError(f"unknown metric {metric!r} in report CSV")
    return report


def confusion_to_csv(cm: ConfusionMatrix) -> str:
    lines = ["true\\pred," + ",".join(cm.class_order)]
    for i, cls in enumerate(cm.class_order):
        lines.append(cls + "," + ",".join(str(int(v)) for v in cm.counts[i]))
    return "\n".join(lines) + "\n"
