import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rhythmid.metrics import (
    ConfusionMatrix,
    MetricsReport,
    balanced_accuracy,
    chance_level,
    format_chance,
    moving_average,
    predict,
)


def recall_oracle(y_true, y_pred):
    """Per-sample loop, independent of the matrix code."""
    hits, seen = {}, {}
    for t, p in zip(y_true, y_pred):
        seen[t] = seen.get(t, 0) + 1
        hits[t] = hits.get(t, 0) + (t == p)
    return sum(hits[c] / seen[c] for c in seen) / len(seen)


labels = st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=80)


def test_perfect_predictions():
    for c in (1, 3, 40):
        y = np.arange(c).repeat(3)
        assert balanced_accuracy(ConfusionMatrix.from_predictions(y, y, c)) == 1.0


def test_hand_example():
    y_true = [0] * 10 + [1] * 5
    y_pred = [0] * 8 + [1] * 2 + [1] * 3 + [0] * 2
    assert balanced_accuracy(ConfusionMatrix.from_predictions(y_true, y_pred, 2)) == pytest.approx(0.7, abs=1e-15)


def test_empty_matrix_is_an_error():
    with pytest.raises(ValueError):
        balanced_accuracy(ConfusionMatrix(np.zeros((3, 3))))


def test_zero_support_classes_are_excluded():
    cm = ConfusionMatrix.from_predictions([0, 0, 2], [0, 1, 2], 4)
    assert balanced_accuracy(cm) == 0.75
    report = MetricsReport.from_confusion(cm)
    assert report.n_classes_scored == 2 and report.n_excluded_classes == 2
    assert np.isnan(report.per_class_recall[1])


@settings(max_examples=200, deadline=None)
@given(labels)
def test_matches_per_sample_oracle(pairs):
    t, p = zip(*pairs)
    assert balanced_accuracy(ConfusionMatrix.from_predictions(t, p, 6)) == pytest.approx(recall_oracle(t, p), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(labels, st.permutations(range(6)))
def test_relabeling_invariance(pairs, perm):
    t, p = zip(*pairs)
    perm = np.array(perm)
    a = balanced_accuracy(ConfusionMatrix.from_predictions(t, p, 6))
    b = balanced_accuracy(ConfusionMatrix.from_predictions(perm[list(t)], perm[list(p)], 6))
    assert a == b


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**31))
def test_balanced_set_equals_accuracy_exactly(c, per_class, seed):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(c), per_class)
    pred = rng.integers(0, c, size=y.size)
    report = MetricsReport.from_confusion(ConfusionMatrix.from_predictions(y, pred, c))
    assert report.balanced_accuracy == report.accuracy


def test_uniform_random_predictor_converges_to_chance():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 10, 100_000)
    pred = rng.integers(0, 10, 100_000)
    assert abs(balanced_accuracy(ConfusionMatrix.from_predictions(y, pred, 10)) - 0.1) < 0.01


def test_chance_level():
    assert format_chance(1166) == "0.0009"
    assert format_chance(1251) == "0.0008"
    assert chance_level(1) == 1.0
    with pytest.raises(ValueError):
        chance_level(0)


def test_merge_is_associative_and_commutative():
    rng = np.random.default_rng(1)
    parts = [ConfusionMatrix.from_predictions(rng.integers(0, 4, 20), rng.integers(0, 4, 20), 4) for _ in range(3)]
    a, b, c = parts
    assert np.array_equal(((a + b) + c).counts, (a + (b + c)).counts)
    assert np.array_equal((a + b).counts, (b + a).counts)
    with pytest.raises(ValueError):
        a + ConfusionMatrix(np.zeros((2, 2)))


def test_predict_ties_go_low():
    assert predict(np.array([[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]])).tolist() == [1, 0]


def test_report_json_and_csv():
    cm = ConfusionMatrix.from_predictions([0, 1, 1], [0, 1, 0], 2)
    doc = json.loads(MetricsReport.from_confusion(cm).to_json())
    assert set(doc) == {"balanced_accuracy", "accuracy", "chance_level", "n_classes_scored",
                        "n_excluded_classes", "n_samples"}
    assert doc["n_samples"] == 3 and doc["balanced_accuracy"] == 0.75
    assert cm.to_csv().splitlines() == ["true\\pred,0,1", "0,1,0", "1,1,1"]


def test_moving_average_examples():
    assert moving_average([1, 2, 3, 4], 2).tolist() == [1, 1.5, 2.5, 3.5]
    assert moving_average([3.0] * 25).tolist() == [3.0] * 25
    x = np.random.default_rng(0).normal(size=30)
    assert np.array_equal(moving_average(x, 1), x)
    assert moving_average([], 10).size == 0
    with pytest.raises(ValueError):
        moving_average([1.0], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.integers(1, 15))
def test_moving_average_bounded_by_window(series, window):
    out = moving_average(series, window)
    x = np.asarray(series)
    for i, v in enumerate(out):
        w = x[max(0, i - window + 1) : i + 1]
        assert w.min() <= v <= w.max()
        assert v == pytest.approx(w.mean(), rel=1e-12, abs=1e-6)
