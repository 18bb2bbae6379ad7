import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurohybrid.metrics import (
    INPUT_ROWS,
    ConfusionMatrix,
    ablation_report,
    auc,
    confusion,
    evaluate,
    grid_from_json,
    roc_curve,
    summary_metrics,
    trapezoid_auc,
    youden,
)

from oracles import count_confusion, pair_auc, roc_by_enumeration


def _scores(draw_labels):
    return st.lists(st.tuples(st.integers(0, 1), st.integers(0, 6)), min_size=2, max_size=40).filter(
        lambda xs: len({y for y, _ in xs}) == 2
    )


# ---------------------------------------------------------------- confusion / summary


def test_confusion_examples():
    cm = confusion([1, 1, 0, 0], [0.9, 0.7, 0.2, 0.1])
    assert cm.fp == 0 and cm.fn == 0
    cm = confusion([1, 0, 1, 0], [0.5] * 4, 0.5)
    assert cm.tp == 2 and cm.fp == 2 and cm.tn == 0 and cm.fn == 0


def test_confusion_hand_case_against_counting():
    y = [1, 0, 1, 1, 0, 0, 1, 0, 1, 0]
    s = [0.9, 0.4, 0.5, 0.2, 0.6, 0.1, 0.55, 0.5, 0.49, 0.3]
    cm = confusion(y, s)
    assert (cm.tp, cm.fp, cm.tn, cm.fn) == count_confusion(y, s, 0.5) == (3, 2, 3, 2)
    assert cm.total == 10 and cm.as_grid() == [[3, 2], [2, 3]]


def test_confusion_rejections():
    with pytest.raises(ValueError):
        confusion([], [])
    with pytest.raises(ValueError):
        confusion([0, 2], [0.1, 0.2])
    with pytest.raises(ValueError):
        confusion([0, 1], [0.1])


@pytest.mark.parametrize("sens,spec,expected", [(0.87, 0.91, 0.78), (0.80, 0.79, 0.59), (0.53, 0.95, 0.48)])
def test_youden_reported_rows(sens, spec, expected):
    assert round(youden(sens, spec), 2) == expected


def test_accuracy_consistent_with_reported_split():
    tp, tn = round(0.87 * 38), round(0.91 * 57)
    cm = ConfusionMatrix(tp=tp, fp=57 - tn, tn=tn, fn=38 - tp)
    acc = summary_metrics(cm)["accuracy"]
    assert 0.89 <= acc <= 0.90


def test_undefined_metrics_are_none():
    m = summary_metrics(ConfusionMatrix(tp=0, fp=0, tn=5, fn=0))
    assert m["sensitivity"] is None and m["youden"] is None and m["specificity"] == 1.0
    assert m["f1"] is None


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_summary_identities(tp, fp, tn, fn):
    cm = ConfusionMatrix(tp, fp, tn, fn)
    m = summary_metrics(cm)
    if m["sensitivity"] is not None and m["specificity"] is not None:
        assert m["youden"] == m["sensitivity"] + m["specificity"] - 1
    if tp + fn:
        assert m["sensitivity"] == tp / (tp + fn)
    if cm.total:
        assert m["accuracy"] == (tp + tn) / cm.total


# ---------------------------------------------------------------- ROC / AUC


def test_auc_examples():
    assert auc([1, 1, 0, 0], [0.9, 0.8, 0.1, 0.2]) == 1.0
    assert auc([1, 0, 1, 0, 0], [0.3] * 5) == 0.5
    with pytest.raises(ValueError):
        auc([1, 1], [0.2, 0.3])


def test_roc_examples():
    fpr, tpr, _ = roc_curve([1, 1, 0, 0], [0.9, 0.8, 0.1, 0.2])
    assert (0.0, 1.0) in set(zip(fpr, tpr))
    fpr, tpr, thr = roc_curve([1, 0, 1], [0.4] * 3)
    assert list(zip(fpr, tpr)) == [(0.0, 0.0), (1.0, 1.0)]
    assert thr[0] == np.inf


def test_roc_six_sample_enumeration():
    y = [1, 0, 1, 0, 0, 1]
    s = [0.8, 0.8, 0.6, 0.3, 0.6, 0.1]
    fpr, tpr, _ = roc_curve(y, s)
    assert list(zip(fpr, tpr)) == roc_by_enumeration(y, s)


@pytest.mark.parametrize("seed", range(100))
def test_rank_auc_equals_trapezoid(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    y = rng.integers(0, 2, size=n)
    y[:2] = [0, 1]
    levels = int(rng.integers(1, 6)) if seed % 2 == 0 else n  # even seeds: heavy ties
    s = rng.integers(0, levels, size=n) / max(levels, 1) + (0 if seed % 2 == 0 else rng.normal(size=n))
    fpr, tpr, _ = roc_curve(y, s)
    assert abs(auc(y, s) - trapezoid_auc(fpr, tpr)) < 1e-12
    if n <= 60:
        assert abs(auc(y, s) - pair_auc(y, s)) < 1e-12


@settings(max_examples=150, deadline=None)
@given(_scores(None))
def test_roc_monotone_and_anchored(pairs):
    y = [p[0] for p in pairs]
    s = [p[1] / 6 for p in pairs]
    fpr, tpr, _ = roc_curve(y, s)
    assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert (np.diff(fpr) >= 0).all() and (np.diff(tpr) >= 0).all()


@settings(max_examples=150, deadline=None)
@given(_scores(None))
def test_auc_monotone_invariance_and_label_swap(pairs):
    y = np.array([p[0] for p in pairs])
    s = np.array([p[1] for p in pairs], dtype=float)
    a = auc(y, s)
    assert a == auc(y, np.exp(s) * 3 - 1)
    assert abs(auc(1 - y, s) - (1 - a)) < 1e-12
    m = summary_metrics(confusion(y, s, 3))
    swapped = summary_metrics(confusion(1 - y, -s, -3 + 1e-9))
    assert m["sensitivity"] == swapped["specificity"] and m["specificity"] == swapped["sensitivity"]


# ---------------------------------------------------------------- reports and the ablation grid


def _report(model, inputs, scores):
    return evaluate([1, 1, 0, 0], scores, "psp-vs-pd", model, inputs)


def test_ablation_grid_rows_bold_and_round_trip():
    reports = [_report(m, i, [0.9, 0.4 + 0.01 * k, 0.3, 0.2]) for k, (m, i) in enumerate(INPUT_ROWS)]
    reports[2] = _report(*INPUT_ROWS[2], [0.9, 0.46, 0.3, 0.2])  # ties row 6 on every column
    table, text = ablation_report({"psp-vs-pd": reports})
    rows = table["tasks"]["psp-vs-pd"]
    assert len(rows) == 7 and len([ln for ln in text.splitlines() if ln.startswith("psp-vs-pd")]) == 7
    best_auc = max(r.auc for r in reports)
    marked = [i for i, r in enumerate(rows) if "auc" in r["best"]]
    assert marked == [i for i, r in enumerate(reports) if r.auc == best_auc]
    back = grid_from_json(json.loads(json.dumps(table)))
    assert [r.to_dict() for r in back["psp-vs-pd"]] == [r.to_dict() for r in reports]


def test_ablation_missing_rows_are_absent():
    table, text = ablation_report({"msa-vs-pd": [_report("ml", "volume", [0.9, 0.8, 0.1, 0.2])]})
    rows = table["tasks"]["msa-vs-pd"]
    assert sum(r["absent"] for r in rows) == 6
    assert "absent" in text and " 0.00 " not in text.split("ml")[0]


def test_evaluate_report_fields():
    r = evaluate([1, 0, 1, 0], [0.8, 0.3, 0.4, 0.6], threshold=0.5)
    assert r.n_test == 4 and r.auc == 0.75
    assert r.sensitivity == 0.5 and r.specificity == 0.5 and r.youden == 0.0
