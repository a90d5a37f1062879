from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import precision_recall_fscore_support

from dha_forge.labels import LABEL_ORDER, NarrativeLabel
from dha_forge.metrics import (ShapeError, accuracy_of, confusion, confusion_to_csv, report,
                               reports_to_csv, reports_to_json)

from oracles import brute_metrics

matrices = st.lists(st.integers(0, 40), min_size=49, max_size=49).map(
    lambda v: np.array(v, dtype=np.int64).reshape(7, 7))


def test_confusion_counts():
    m = confusion(["SSV", "SSV", "GUD"], [NarrativeLabel.SSV, 1, "GUD"])
    assert m[0, 0] == 1 and m[0, 1] == 1 and m[4, 4] == 1 and m.sum() == 3


def test_confusion_length_mismatch():
    with pytest.raises(ShapeError):
        confusion([0, 1], [0])


def test_perfect_and_uniform_cases():
    r = report(np.eye(7, dtype=int) * 5)
    assert r.accuracy == 1.0 and r.macro.f1 == 1.0 and r.weighted.recall == 1.0
    r = report(np.ones((7, 7), dtype=int))
    assert r.accuracy == pytest.approx(1 / 7)


def test_undefined_class_flagged():
    m = np.zeros((7, 7), dtype=int)
    m[0, 0] = 3
    m[1, 0] = 2
    r = report(m)
    c = r.per_class[2]
    assert (c.precision, c.recall, c.f1) == (0.0, 0.0, 0.0)
    assert not c.precision_defined and not c.recall_defined and not c.f1_defined
    # class 1: recall defined (support 2) but zero, precision undefined
    c1 = r.per_class[1]
    assert c1.recall_defined and not c1.precision_defined and not c1.f1_defined


def test_hand_case():
    m = np.zeros((7, 7), dtype=int)
    m[0, 0], m[0, 1], m[1, 1], m[1, 0] = 8, 2, 3, 1
    r = report(m)
    p, rec = Fraction(8, 9), Fraction(8, 10)
    assert r.per_class[0].precision == float(p)
    assert r.per_class[0].f1 == float(2 * p * rec / (p + rec))
    assert r.accuracy == 11 / 14


def test_empty_matrix():
    r = report(np.zeros((7, 7), dtype=int))
    assert r.accuracy == 0.0 and r.total == 0


def test_shape_and_sign_errors():
    with pytest.raises(ShapeError):
        report(np.zeros((6, 6)))
    with pytest.raises(ValueError):
        report(-np.eye(7, dtype=int))


@given(matrices)
def test_matches_brute_force_oracle(m):
    r = report(m)
    per, macro, weighted, acc = brute_metrics(m)
    for c, (p, rec, f, s) in zip(r.per_class, per):
        assert (c.precision, c.recall, c.f1, c.support) == pytest.approx((p, rec, f, s), abs=1e-12)
    assert (r.macro.precision, r.macro.recall, r.macro.f1) == pytest.approx(macro, abs=1e-12)
    assert (r.weighted.precision, r.weighted.recall, r.weighted.f1) == pytest.approx(weighted, abs=1e-12)
    assert r.accuracy == pytest.approx(acc, abs=1e-15)


@given(matrices)
def test_weighted_recall_equals_accuracy(m):
    r = report(m)
    assert r.weighted.recall == r.accuracy


def test_agrees_with_sklearn():
    rng = np.random.default_rng(0)
    y_true, y_pred = rng.integers(0, 7, 500), rng.integers(0, 7, 500)
    r = report(confusion(y_true, y_pred))
    p, rec, f, s = precision_recall_fscore_support(y_true, y_pred, labels=range(7), zero_division=0)
    np.testing.assert_allclose([c.precision for c in r.per_class], p, atol=1e-12)
    np.testing.assert_allclose([c.f1 for c in r.per_class], f, atol=1e-12)
    pm, rm, fm, _ = precision_recall_fscore_support(y_true, y_pred, average="macro", zero_division=0)
    assert r.macro.f1 == pytest.approx(fm, abs=1e-12)
    assert accuracy_of(y_true, y_pred) == pytest.approx(np.mean(y_true == y_pred), abs=1e-15)


def test_table_output():
    m = np.eye(7, dtype=int) * 3
    text = reports_to_csv({"A": report(m), "B": report(np.ones((7, 7), dtype=int))})
    lines = text.splitlines()
    assert lines[0] == "Class (Support),A,B"
    assert lines[1] == "SSV (3),1.00 / 1.00 / 1.00,0.14 / 0.14 / 0.14"
    assert lines[8] == "Accuracy,1.00,0.14"
    assert len(lines) == 11
    assert '"per_class"' in reports_to_json({"A": report(m)})
    assert confusion_to_csv(m).splitlines()[0] == "true\\pred," + ",".join(l.value for l in LABEL_ORDER)
