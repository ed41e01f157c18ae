import json
import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_confusion, brute_metrics, ensemble_label, tree_walk
from sleepsense.classify import (
    GBTModel,
    GBTParams,
    evaluate,
    feature_importance,
    format_results_table,
    internal_node_count,
    majority_baseline,
    predict,
    train_gbt,
)
from sleepsense.errors import (
    DimensionMismatch,
    EmptyTrain,
    LengthMismatch,
    NonFiniteFeature,
    SingleClassTrain,
)


def xor_fixture(seed=7, n=400):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    which = np.repeat(np.arange(4), n // 4)
    X = centers[which] + rng.normal(scale=0.08, size=(n, 2))
    y = [int(a != b) for a, b in centers[which].astype(int)]
    return X, y


def blobs(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 3)) + np.where(y[:, None] == 1, 4.0, -4.0) * np.array([1.0, 0.5, 0.0])
    return X, [int(v) for v in y]


@pytest.fixture(scope="module")
def xor_model():
    X, y = xor_fixture()
    return X, y, train_gbt(X, y, params=GBTParams(n_rounds=50, max_depth=2))


# ---------------------------------------------------------------------------
# Training


def test_xor_is_learned(xor_model):
    X, y, model = xor_model
    acc = np.mean(np.array(model.predict_labels(X)) == np.array(y))
    assert acc >= 0.99


def test_training_loss_never_increases(xor_model):
    loss = xor_model[2].train_loss
    assert len(loss) == 51
    assert all(b <= a for a, b in zip(loss, loss[1:]))
    assert loss[-1] < loss[0]


def test_separable_blobs_generalise():
    X, y = blobs(1, 300)
    Xv, yv = blobs(2, 200)
    model = train_gbt(X, y, Xv, yv, params=GBTParams(n_rounds=60, max_depth=3))
    acc = np.mean(np.array(model.predict_labels(Xv)) == np.array(yv))
    assert acc >= 0.99
    assert len(model.val_loss) == model.n_rounds + 1


def test_early_stopping_truncates_to_best_round():
    rng = np.random.default_rng(0)
    X, Xv = rng.normal(size=(200, 3)), rng.normal(size=(100, 3))
    y, yv = list(rng.integers(0, 2, 200)), list(rng.integers(0, 2, 100))
    model = train_gbt(X, y, Xv, yv, params=GBTParams(n_rounds=200, max_depth=4, early_stopping_rounds=10))
    assert model.n_rounds < 200
    assert all(len(t) == model.n_rounds for t in model.trees)
    assert min(model.val_loss) == model.val_loss[-1]


def test_training_preconditions():
    X = np.zeros((10, 2))
    with pytest.raises(SingleClassTrain):
        train_gbt(X, ["a"] * 10)
    bad = np.ones((10, 2))
    bad[3, 1] = np.nan
    with pytest.raises(NonFiniteFeature):
        train_gbt(bad, [0, 1] * 5)
    bad[3, 1] = np.inf
    with pytest.raises(NonFiniteFeature):
        train_gbt(bad, [0, 1] * 5)
    with pytest.raises(LengthMismatch):
        train_gbt(X, [0, 1])
    with pytest.raises(DimensionMismatch):
        train_gbt(X, [0, 1] * 5, np.zeros((4, 3)), [0, 1, 0, 1])


def test_training_is_deterministic():
    X, y = xor_fixture()
    a = train_gbt(X, y, params=GBTParams(n_rounds=20, max_depth=2))
    b = train_gbt(X, y, params=GBTParams(n_rounds=20, max_depth=2))
    assert a.to_json() == b.to_json()


def test_monotone_transform_invariance():
    X, y = xor_fixture()
    Xt, _ = xor_fixture(seed=99, n=200)
    params = GBTParams(n_rounds=30, max_depth=2)
    base = train_gbt(X, y, params=params).predict_labels(Xt)
    # dense ranks over the pooled values are strictly increasing on every value used
    pooled = np.vstack([X, Xt])
    ranks = np.column_stack([np.unique(pooled[:, j], return_inverse=True)[1] for j in range(2)]).astype(float)
    ranked = train_gbt(ranks[: len(X)], y, params=params).predict_labels(ranks[len(X):])
    assert ranked == base
    cubed = train_gbt(X**3 + 5 * X, y, params=params).predict_labels(Xt**3 + 5 * Xt)
    assert cubed == base


# ---------------------------------------------------------------------------
# Prediction


def test_zero_round_model_is_uniform():
    model = train_gbt(np.arange(20.0)[:, None], ["b", "a", "c", "a"] * 5, params=GBTParams(n_rounds=0))
    label, proba = predict(model, [3.0])
    assert label == "a"
    np.testing.assert_allclose(proba, [1 / 3] * 3, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
def test_probabilities_sum_to_one(row):
    X, y = xor_fixture()
    model = _shared_model(X, y)
    _, proba = predict(model, row)
    assert abs(proba.sum() - 1.0) <= 1e-12
    assert np.all(proba >= 0)


_CACHE = {}


def _shared_model(X, y):
    if "m" not in _CACHE:
        _CACHE["m"] = train_gbt(X, y, params=GBTParams(n_rounds=15, max_depth=2))
    return _CACHE["m"]


def test_prediction_matches_hand_traversal(xor_model):
    _, _, model = xor_model
    doc = json.loads(model.to_json())
    for point, expected in (([0.02, 0.03], 0), ([0.97, 0.05], 1), ([0.04, 1.02], 1), ([1.0, 1.0], 0)):
        assert ensemble_label(doc, point) == expected
        assert predict(model, point)[0] == expected


def test_predict_dimension_checked(xor_model):
    with pytest.raises(DimensionMismatch):
        predict(xor_model[2], [1.0, 2.0, 3.0])


def test_model_json_roundtrip(xor_model):
    X, _, model = xor_model
    again = GBTModel.from_json(model.to_json())
    assert again.to_json() == model.to_json()
    np.testing.assert_array_equal(again.predict_proba(X), model.predict_proba(X))
    doc = json.loads(model.to_json())
    assert doc["format"] == "sleepsense-gbt"
    assert all(len(per_class) == doc["n_rounds"] for per_class in doc["trees"])
    leafs = [tree_walk(t, X[0]) for t in doc["trees"][0]]
    assert len(leafs) == doc["n_rounds"]


# ---------------------------------------------------------------------------
# Feature importance


def test_stump_ensemble_counts():
    rng = np.random.default_rng(3)
    y = [0, 1] * 50
    X = np.ones((100, 5))
    X[:, 3] = np.array(y) + rng.uniform(0, 0.5, 100)
    model = train_gbt(X, y, params=GBTParams(n_rounds=10, max_depth=1))
    assert feature_importance(model) == {"f0": 0, "f1": 0, "f2": 0, "f3": 20, "f4": 0}


def test_importance_conserves_node_count(xor_model):
    model = xor_model[2]
    counts = feature_importance(model)
    assert all(isinstance(v, int) and v >= 0 for v in counts.values())
    assert sum(counts.values()) == internal_node_count(model)
    assert set(counts) == {"f0", "f1"}


# ---------------------------------------------------------------------------
# Majority baseline


def test_majority_basics():
    assert majority_baseline(["A", "A", "B"]).predict_labels([0, 0, 0, 0]) == ["A"] * 4
    assert majority_baseline([2, 1, 1, 2]).label == 1
    with pytest.raises(EmptyTrain):
        majority_baseline([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=40), st.lists(st.integers(0, 4), min_size=1, max_size=40))
def test_majority_accuracy_is_modal_frequency(train, test):
    clf = majority_baseline(train)
    top = max(Counter(train).values())
    assert clf.label == min(k for k, v in Counter(train).items() if v == top)
    report = evaluate(clf.predict_labels(test), test)
    assert report.accuracy == test.count(clf.label) / len(test)


# ---------------------------------------------------------------------------
# Metrics


def test_hand_computed_weighted_f1():
    r = evaluate(list("ABBB"), list("AABB"))
    assert r.accuracy == 0.75
    assert abs(r.weighted_f1 - 0.7333333333333333) <= 1e-9
    assert r.per_class_f1 == {"A": 2 / 3, "B": 0.8}


def test_perfect_and_refusal_cases():
    r = evaluate([1, 2, 3], [1, 2, 3])
    assert (r.accuracy, r.weighted_f1, r.refusal_rate) == (1.0, 1.0, 0.0)
    r = evaluate(["A", None, "B", "B"], ["A", "A", "B", "B"])
    assert r.accuracy == 1.0
    assert r.refusal_rate == 0.25
    assert r.n_classified == 3
    assert r.confusion.total == 3
    r = evaluate([None, None], ["A", "B"])
    assert r.accuracy is None and r.refusal_rate == 1.0
    with pytest.raises(LengthMismatch):
        evaluate(["A"], ["A", "B"])


def test_metric_oracle_equivalence():
    rng = random.Random(2024)
    for _ in range(1000):
        k = rng.randint(1, 6)
        labels = list(range(k))
        n = rng.randint(1, 50)
        truth = [rng.randrange(k) for _ in range(n)]
        pred = [None if rng.random() < 0.1 else rng.randrange(k) for _ in range(n)]
        report = evaluate(pred, truth, labels=labels)
        acc, wf1, refusal = brute_metrics(truth, pred, labels)
        assert report.accuracy == acc
        assert report.weighted_f1 == wf1
        assert report.refusal_rate == refusal
        counts = brute_confusion(truth, pred, labels)
        assert report.confusion.counts.tolist() == [[counts[t][p] for p in labels] for t in labels]


def test_results_table_layout():
    rows = [
        ("Baseline (majority vote)", evaluate([0] * 3, [0, 0, 1]), ""),
        ("GBT", evaluate([0, 1, 1], [0, 0, 1]), "native"),
        ("LLM zero-shot", evaluate([0, None, 1, 1], [0, 0, 1, 1]), ""),
    ]
    table = format_results_table(rows)
    lines = table.splitlines()
    assert lines[0].split(" | ")[0].strip() == "Models"
    assert set(lines[1]) <= {"-", "+"}
    assert lines[2].startswith("Baseline (majority vote) | 66.7  | 0.53")
    assert '25% "cannot assist"' in lines[4]
    assert len({line.index("|") for line in lines if "|" in line}) == 1
