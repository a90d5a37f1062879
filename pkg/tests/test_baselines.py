import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.feature_extraction.text import TfidfVectorizer

from dha_forge.baselines import (FitError, LinearClassifier, LinearConfig, TfidfModel, linear_fit,
                                 linear_predict, tfidf_fit, tfidf_matrix, tfidf_transform)
from dha_forge.metrics import ShapeError

from oracles import tfidf_reference

TOY = ["a b", "b c c", "d a b"]


def test_idf_examples():
    m = tfidf_fit([f"common x{i}" for i in range(100)])
    assert m.idf[m.index["common"]] == 1.0
    m = tfidf_fit(["rare", "other", "thing"])
    assert m.idf[m.index["rare"]] == pytest.approx(1 + np.log(2), abs=1e-12)
    assert abs(1 + np.log(2) - 1.6931) < 1e-4


def test_toy_golden_vectors():
    m = tfidf_fit(TOY)
    assert m.terms == ("a", "b", "c", "d")
    terms, idf, rows = tfidf_reference(TOY)
    for doc, row in zip(TOY, rows):
        got = {m.terms[i]: v for i, v in tfidf_transform(doc, m).items()}
        assert got.keys() == row.keys()
        for t in row:
            assert got[t] == pytest.approx(row[t], abs=1e-12)
    # hand value: doc "b c c", idf(b) = ln(4/4)+1 = 1, idf(c) = ln(4/2)+1
    c = 2 * (1 + np.log(2))
    assert tfidf_transform("b c c", m)[m.index["c"]] == pytest.approx(c / np.hypot(1, c), abs=1e-12)


def test_agrees_with_sklearn(small_narratives):
    from dha_forge.narrative import render_prompt

    docs = [render_prompt(n).user for n in small_narratives[:200]]
    m = tfidf_fit(docs)
    ref = TfidfVectorizer(tokenizer=str.split, token_pattern=None, lowercase=False,
                          smooth_idf=True, norm="l2")
    x_ref = ref.fit_transform(docs)
    assert tuple(ref.get_feature_names_out()) == m.terms
    np.testing.assert_allclose(m.idf, ref.idf_, atol=1e-12)
    np.testing.assert_allclose(tfidf_matrix(docs, m).toarray(), x_ref.toarray(), atol=1e-12)


def test_transform_edge_cases():
    m = tfidf_fit(TOY)
    assert tfidf_transform("", m) == {}
    assert tfidf_transform("zzz", m) == {}
    assert tfidf_transform("d", m) == {m.index["d"]: 1.0}


@given(st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), max_size=12))
def test_transform_norm(words):
    m = tfidf_fit(TOY)
    v = tfidf_transform(" ".join(words), m)
    norm = np.sqrt(sum(x * x for x in v.values()))
    assert norm == 0 or abs(norm - 1) < 1e-9


def test_fit_errors_and_determinism():
    with pytest.raises(FitError):
        tfidf_fit([])
    a, b = tfidf_fit(TOY), tfidf_fit(TOY)
    assert a.terms == b.terms and np.array_equal(a.idf, b.idf)
    assert TfidfModel.from_json(a.to_json()).terms == a.terms


def test_zero_weights_uniform():
    clf = LinearClassifier(np.zeros((7, 3)), np.zeros(7))
    np.testing.assert_allclose(linear_predict(clf, {0: 1.0}), np.full(7, 1 / 7), atol=1e-15)


def test_separable_toy_reaches_full_accuracy():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(2, 0.5, (30, 2)), rng.normal(-2, 0.5, (30, 2))])
    y = np.array([0] * 30 + [3] * 30)
    clf = linear_fit(x, y, LinearConfig(steps=200))
    assert (clf.predict(x).argmax(1) == y).all()


def test_grid_search_uses_eval_set():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(40, 5)), rng.integers(0, 7, 40)
    clf = linear_fit(x, y, LinearConfig(steps=20), x[:10], y[:10])
    assert clf.l2 in LinearConfig().l2_grid and "eval_accuracy" in clf.meta


def test_prediction_sums_to_one():
    rng = np.random.default_rng(2)
    clf = LinearClassifier(rng.normal(size=(7, 6)) * 5, rng.normal(size=7))
    p = clf.predict(rng.normal(size=(100, 6)) * 10)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-9)
    back = LinearClassifier.from_json(clf.to_json())
    np.testing.assert_array_equal(back.weight, clf.weight)


def test_shape_errors():
    clf = LinearClassifier(np.zeros((7, 3)), np.zeros(7))
    with pytest.raises(ShapeError):
        clf.predict(np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        linear_fit(np.zeros((3, 2)), [0, 1])
    with pytest.raises(FitError):
        linear_fit(np.zeros((0, 2)), [])
