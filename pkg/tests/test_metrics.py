import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnseq.metrics import (MetricReport, anticipation_mae, balanced_accuracy, confusion_matrix,
                           macro_f1, video_accuracy)


# -- brute-force oracles ---------------------------------------------------------

def oracle_macro_f1(preds, labels, k):
    scores = []
    for c in range(k):
        tp = sum(1 for p, l in zip(preds, labels) if p == c and l == c)
        fp = sum(1 for p, l in zip(preds, labels) if p == c and l != c)
        fn = sum(1 for p, l in zip(preds, labels) if p != c and l == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(scores) / k


def oracle_balanced(videos):
    per = []
    for preds, labels in videos:
        recalls = []
        for c in sorted(set(labels)):
            idx = [i for i, l in enumerate(labels) if l == c]
            recalls.append(sum(preds[i] == c for i in idx) / len(idx))
        per.append(sum(recalls) / len(recalls))
    return sum(per) / len(per)


def oracle_wmae(preds, targets, h):
    ins = [abs(p - t) for p, t in zip(preds, targets) if t < h]
    outs = [abs(p - t) for p, t in zip(preds, targets) if t >= h]
    a = sum(ins) / len(ins) if ins else None
    b = sum(outs) / len(outs) if outs else None
    if a is None:
        return b
    if b is None:
        return a
    return (a + b) / 2


# -- worked examples ---------------------------------------------------------------

def test_video_accuracy_examples():
    assert video_accuracy([np.arange(5)], [np.arange(5)]) == 1.0
    a = [np.zeros(10), np.r_[np.zeros(500), np.ones(500)]]
    b = [np.zeros(10), np.zeros(1000)]
    assert video_accuracy(a, b) == 0.75
    labels = np.r_[np.zeros(40), np.ones(60)]
    assert video_accuracy([np.zeros(100)], [labels]) == pytest.approx(0.4)


def test_video_accuracy_concatenated_form_and_empty_videos():
    preds = np.array([0, 1, 1, 2, 2])
    labels = np.array([0, 1, 0, 2, 1])
    assert video_accuracy(preds, labels, lengths=[2, 3]) == pytest.approx((1.0 + 1 / 3) / 2)
    with pytest.warns(UserWarning):
        assert video_accuracy([np.array([1]), np.array([])], [np.array([1]), np.array([])]) == 1.0


def test_balanced_accuracy_examples():
    assert balanced_accuracy([np.array([0, 1, 2])], [np.array([0, 1, 2])]) == 1.0
    assert balanced_accuracy([np.array([1, 1, 2, 2])], [np.array([1, 1, 2, 2]) * 0 + [1, 1, 2, 2]]) == 1.0
    assert balanced_accuracy([np.array([1, 1, 1, 1])], [np.array([1, 1, 2, 2])]) == 0.5
    preds = np.array([0, 0, 1, 1, 2, 0, 2, 2, 1])
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    assert balanced_accuracy([preds], [labels]) == pytest.approx(oracle_balanced([(preds, labels)]))
    assert balanced_accuracy([preds], [labels]) == pytest.approx((2 / 3 + 1 / 3 + 2 / 3) / 3)


def test_macro_f1_examples():
    assert macro_f1(np.array([0, 1, 2]), np.array([0, 1, 2]), 3) == 1.0
    # class 2 never predicted, never true: contributes zero
    assert macro_f1(np.array([0, 1]), np.array([0, 1]), 3) == pytest.approx(2 / 3)
    # class 0: TP=1, FP=1, FN=1
    preds = np.array([0, 0, 1])
    labels = np.array([0, 1, 0])
    cm = confusion_matrix(preds, labels, 2)
    assert cm[0, 0] == 1 and cm[1, 0] == 1 and cm[0, 1] == 1
    f1_0 = 2 * 1 / (2 * 1 + 1 + 1)
    assert f1_0 == 0.5
    assert macro_f1(preds, labels, 2) == pytest.approx((0.5 + 0.0) / 2)


def test_wmae_worked_example():
    h = 5.0
    targets = np.array([2.0, 4.0, 5.0, 5.0, 5.0])
    preds = np.full(5, h)
    m = anticipation_mae(preds, targets, h)
    assert m["inMAE"] == [2.0] and m["outMAE"] == [0.0] and m["wMAE"] == [1.0]


def test_wmae_perfect_all_outside_and_degenerate():
    t = np.array([[0.0, 5.0], [3.0, 5.0]])
    m = anticipation_mae(t, t, 5.0)
    assert m["mean_wMAE"] == 0.0
    assert m["outMAE"][1] == 0.0 and m["degenerate"] == [0, 1]
    assert np.isnan(m["inMAE"][1])


def test_wmae_concatenates_videos_before_averaging():
    p = [np.array([[0.0], [5.0]]), np.array([[1.0]] * 8)]
    t = [np.array([[1.0], [5.0]]), np.array([[5.0]] * 8)]
    m = anticipation_mae(p, t, 5.0)
    assert m["inMAE"] == [1.0]
    assert m["outMAE"] == [pytest.approx(32 / 9)]


# -- properties ------------------------------------------------------------------------

def test_macro_f1_matches_oracle_on_100_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 30))
        preds, labels = rng.integers(0, k, n), rng.integers(0, k, n)
        assert macro_f1(preds, labels, k) == pytest.approx(oracle_macro_f1(preds, labels, k), abs=1e-15)


def test_balanced_accuracy_matches_oracle_on_100_instances():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k = int(rng.integers(2, 5))
        vids = [(rng.integers(0, k, n), rng.integers(0, k, n)) for n in rng.integers(1, 15, rng.integers(1, 4))]
        got = balanced_accuracy([p for p, _ in vids], [l for _, l in vids])
        assert got == pytest.approx(oracle_balanced(vids), abs=1e-15)


def test_wmae_matches_oracle_on_100_instances():
    rng = np.random.default_rng(2)
    for _ in range(100):
        h = float(rng.integers(2, 10))
        n = int(rng.integers(1, 25))
        targets = np.minimum(rng.integers(0, int(h) + 4, n).astype(float), h)
        preds = rng.uniform(0, h, n)
        assert anticipation_mae(preds, targets, h)["wMAE"][0] == pytest.approx(
            oracle_wmae(preds, targets, h), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 3), min_size=1, max_size=12), min_size=1, max_size=5), st.randoms())
def test_metrics_permutation_invariant_over_videos(label_lists, rnd):
    labels = [np.array(l) for l in label_lists]
    preds = [np.array([(x + i) % 4 for i, x in enumerate(l)]) for l in label_lists]
    order = list(range(len(labels)))
    rnd.shuffle(order)
    for fn in (video_accuracy, balanced_accuracy):
        assert fn(preds, labels) == pytest.approx(fn([preds[i] for i in order], [labels[i] for i in order]))
    assert macro_f1(preds, labels, 4) == macro_f1([preds[i] for i in order], [labels[i] for i in order], 4)


def test_report_serialization():
    r = MetricReport.for_phase([np.array([0, 1])], [np.array([0, 0])], 2, seed=3, config_hash="abc")
    doc = json.loads(r.to_json())
    assert doc["accuracy"] == 0.5 and doc["seed"] == 3
    lines = r.to_csv_row().strip().split("\n")
    assert lines[0].startswith("seed,config_hash,accuracy") and len(lines) == 2
    a = MetricReport.for_anticipation(np.array([[1.0]]), np.array([[1.0]]), 4.0)
    assert a.scalars()["mean_wMAE"] == 0.0
    assert 0.0 <= r.accuracy <= 1.0
