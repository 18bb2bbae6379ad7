"""Binary classification metrics: confusion matrix, summary rates, ROC and AUC.

Metrics whose denominator is zero are reported as ``None`` ("undefined")
rather than 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("sensitivity", "specificity", "youden", "auc", "f1", "accuracy")
MODEL_KINDS = ("ml", "cnn", "hybrid")
INPUT_ROWS = (
    ("ml", "volume"),
    ("cnn", "mask"),
    ("cnn", "mri"),
    ("cnn", "mri+mask"),
    ("hybrid", "mask+volume"),
    ("hybrid", "mri+volume"),
    ("hybrid", "mri+mask+volume"),
)


def _binary(labels, scores=None):
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty input")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    y = y.astype(int)
    if scores is None:
        return y
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"labels and scores differ in shape: {y.shape} vs {s.shape}")
    return y, s


def _both_classes(y: np.ndarray) -> None:
    if y.min() == y.max():
        raise ValueError("both classes must be present")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int
    positive: str = "positive"

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_grid(self) -> list[list[int]]:
        """[[tn, fp], [fn, tp]]: rows are true negative/positive."""
        return [[self.tn, self.fp], [self.fn, self.tp]]


def confusion(labels, scores, threshold: float = 0.5, positive: str = "positive") -> ConfusionMatrix:
    """Counts with ``score >= threshold`` predicted positive."""
    y, s = _binary(labels, scores)
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int((pred & pos).sum()),
        fp=int((pred & ~pos).sum()),
        tn=int((~pred & ~pos).sum()),
        fn=int((~pred & pos).sum()),
        positive=positive,
    )


def _ratio(num: float, den: float):
    return num / den if den > 0 else None


def summary_metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    sens = _ratio(cm.tp, cm.tp + cm.fn)
    spec = _ratio(cm.tn, cm.tn + cm.fp)
    return {
        "sensitivity": sens,
        "specificity": spec,
        "youden": youden(sens, spec),
        "f1": _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
        "accuracy": _ratio(cm.tp + cm.tn, cm.total),
    }


def youden(sensitivity, specificity):
    if sensitivity is None or specificity is None:
        return None
    return sensitivity + specificity - 1.0


def roc_curve(labels, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points ``(fpr, tpr, thresholds)`` from (0, 0) to (1, 1).

    Thresholds are ``+inf`` followed by the distinct scores in decreasing
    order; a subject is positive at threshold t when ``score >= t``.
    """
    y, s = _binary(labels, scores)
    _both_classes(y)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s_sorted)) if s.size > 1 else np.array([], int)
    last = np.r_[distinct, s.size - 1]
    tps = np.cumsum(y_sorted)[last]
    fps = (last + 1) - tps
    n_pos, n_neg = y.sum(), y.size - y.sum()
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thr = np.r_[np.inf, s_sorted[last]]
    keep = np.r_[True, (np.diff(fpr) != 0) | (np.diff(tpr) != 0)]
    return fpr[keep], tpr[keep], thr[keep]


def auc(labels, scores) -> float:
    """Rank statistic ``P(score_pos > score_neg) + 0.5 P(tie)``."""
    y, s = _binary(labels, scores)
    _both_classes(y)
    ranks = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def trapezoid_auc(fpr, tpr) -> float:
    return float(np.trapezoid(tpr, fpr))


@dataclass
class EvalReport:
    task: str
    model: str
    inputs: str
    confusion: ConfusionMatrix
    sensitivity: float | None
    specificity: float | None
    youden: float | None
    f1: float | None
    accuracy: float | None
    auc: float | None
    roc: list[tuple[float, float, float]] = field(default_factory=list)
    threshold: float = 0.5
    n_test: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = asdict(self.confusion)
        d["roc"] = [{"fpr": f, "tpr": t, "threshold": _json_float(h)} for f, t, h in self.roc]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        d = dict(d)
        d["confusion"] = ConfusionMatrix(**d["confusion"])
        d["roc"] = [(r["fpr"], r["tpr"], float(r["threshold"])) for r in d["roc"]]
        return cls(**d)


def _json_float(v: float):
    return "inf" if v == np.inf else v


def evaluate(labels, scores, task: str = "", model: str = "", inputs: str = "",
             threshold: float = 0.5, positive: str = "positive") -> EvalReport:
    cm = confusion(labels, scores, threshold, positive)
    summ = summary_metrics(cm)
    y = _binary(labels)
    if y.min() != y.max():
        fpr, tpr, thr = roc_curve(labels, scores)
        roc = [(float(a), float(b), float(c)) for a, b, c in zip(fpr, tpr, thr)]
        area = auc(labels, scores)
    else:
        roc, area = [], None
    return EvalReport(task=task, model=model, inputs=inputs, confusion=cm, auc=area,
                      roc=roc, threshold=threshold, n_test=cm.total, **summ)


# ---------------------------------------------------------------- ablation table


def _column_max(rows: Sequence[EvalReport | None], metric: str):
    vals = [getattr(r, metric) for r in rows if r is not None and getattr(r, metric) is not None]
    return max(vals) if vals else None


def ablation_report(grid: Mapping[str, Sequence[EvalReport | None]]) -> tuple[dict, str]:
    """Table of (model, inputs) rows per task with per-column maxima marked.

    ``grid`` maps a task name to reports; missing rows of the standard seven
    are reported as absent.  Returns ``(json_dict, aligned_text)``; bold
    maxima appear as ``**0.95**`` in the text and as ``best`` lists in JSON.
    """
    out: dict = {"tasks": {}}
    lines = []
    head = f"{'Task':<12} {'Model':<7} {'Input Data':<17} " + " ".join(f"{m.capitalize():>12}" for m in METRIC_NAMES)
    lines.append(head)
    lines.append("-" * len(head))
    for task, reports in grid.items():
        by_key = {(r.model, r.inputs): r for r in reports if r is not None}
        rows = [by_key.get(key) for key in INPUT_ROWS]
        best = {m: _column_max(rows, m) for m in METRIC_NAMES}
        task_rows = []
        for (kind, inputs), r in zip(INPUT_ROWS, rows):
            if r is None:
                task_rows.append({"model": kind, "inputs": inputs, "absent": True})
                cells = [f"{'absent':>12}"] * len(METRIC_NAMES)
            else:
                marks = [m for m in METRIC_NAMES if best[m] is not None and getattr(r, m) == best[m]]
                task_rows.append({"model": kind, "inputs": inputs, "absent": False,
                                  "report": r.to_dict(), "best": marks})
                cells = []
                for m in METRIC_NAMES:
                    v = getattr(r, m)
                    txt = "undefined" if v is None else f"{v:.2f}"
                    cells.append(f"{('**' + txt + '**') if m in marks else txt:>12}")
            lines.append(f"{task:<12} {kind:<7} {inputs:<17} " + " ".join(cells))
        out["tasks"][task] = task_rows
        lines.append("")
    return out, "\n".join(lines).rstrip() + "\n"


def grid_from_json(d: Mapping) -> dict[str, list[EvalReport | None]]:
    grid = {}
    for task, rows in d["tasks"].items():
        grid[task] = [None if r["absent"] else EvalReport.from_dict(r["report"]) for r in rows]
    return grid


def dumps(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=1, sort_keys=True)
