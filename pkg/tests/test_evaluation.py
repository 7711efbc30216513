import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from echoview.evaluation import (binomial_majority_error, confusion_matrix, evaluate_predictions, f_score,
                                 majority_vote, precision_recall_f, roc_auc, roc_curve, row_percentages,
                                 simulate_vote_errors, topk_accuracy)


def pairwise_auc(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def tally(y_true, y_pred, k):
    tp = [sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c) for c in range(k)]
    fp = [sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c) for c in range(k)]
    fn = [sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c) for c in range(k)]
    return tp, fp, fn


# ---------------------------------------------------------------- F-score

def test_f_score_examples():
    assert abs(f_score(0.8, 0.6) - 0.6857142857142857) < 1e-12
    assert f_score(0.0, 0.7) == 0.0
    assert f_score(0.0, 0.0) == 0.0
    for x in (0.1, 0.5, 0.93):
        assert abs(f_score(x, x) - x) < 1e-15
    with pytest.raises(ValueError):
        f_score(1.2, 0.5)


# ---------------------------------------------------------------- confusion, precision, recall

def test_hand_built_three_class_case():
    y_true = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]
    y_pred = [0, 1, 0, 1, 1, 2, 2, 0, 2, 2]
    cm = confusion_matrix(y_true, y_pred, 3)
    assert cm.tolist() == [[2, 1, 0], [0, 2, 1], [1, 0, 3]]
    p, r, f = precision_recall_f(cm)
    np.testing.assert_allclose(p, [2 / 3, 2 / 3, 3 / 4])
    np.testing.assert_allclose(r, [2 / 3, 2 / 3, 3 / 4])
    np.testing.assert_allclose(f, [2 / 3, 2 / 3, 3 / 4])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=40))))
def test_confusion_and_prf_match_counting_oracle(case):
    k, pairs = case
    y_true = [a for a, _ in pairs]
    y_pred = [b for _, b in pairs]
    cm = confusion_matrix(y_true, y_pred, k)
    assert cm.sum() == len(pairs)
    for i in range(k):
        for j in range(k):
            assert cm[i, j] == sum(1 for t, p in pairs if t == i and p == j)
    tp, fp, fn = tally(y_true, y_pred, k)
    p, r, f = precision_recall_f(cm)
    for c in range(k):
        pe = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        re = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        fe = 2 * pe * re / (pe + re) if pe + re else 0.0
        assert p[c] == pe and r[c] == re
        assert abs(f[c] - fe) < 1e-15
    pct = row_percentages(cm)
    for i in range(k):
        if cm[i].sum():
            assert 99.9 <= pct[i].sum() <= 100.1


# ---------------------------------------------------------------- ROC / AUC

def test_auc_extremes():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[0] == 1.0
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1])[0] == 0.5
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_eight_sample_mixed_case():
    scores = [0.9, 0.7, 0.7, 0.6, 0.4, 0.4, 0.3, 0.1]
    pos = [1, 0, 1, 1, 0, 1, 0, 0]
    assert abs(roc_auc(scores, pos)[0] - pairwise_auc(scores, pos)) < 1e-12
    assert abs(pairwise_auc(scores, pos) - 13 / 16) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]) | st.floats(0, 1), st.booleans()),
                min_size=2, max_size=30).filter(lambda v: any(b for _, b in v) and not all(b for _, b in v)))
def test_auc_equals_pairwise_ordering(values):
    scores = [s for s, _ in values]
    pos = [b for _, b in values]
    auc, curve = roc_auc(scores, pos)
    assert abs(auc - pairwise_auc(scores, pos)) < 1e-9
    fpr, tpr, thr = roc_curve(scores, pos)
    assert fpr[0] == tpr[0] == 0 and fpr[-1] == tpr[-1] == 1
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert thr[0] == np.inf and thr[-1] == -np.inf


# ---------------------------------------------------------------- top-k

def test_five_sample_topk_table():
    probs = np.array([[0.5, 0.3, 0.2],
                      [0.1, 0.6, 0.3],
                      [0.4, 0.4, 0.2],
                      [0.2, 0.3, 0.5],
                      [0.3, 0.3, 0.4]])
    labels = np.array([1, 1, 1, 0, 0])
    # enumerate by hand: ranks (ties to lower index)
    top2 = [[0, 1], [1, 2], [0, 1], [2, 1], [2, 0]]
    expect = np.mean([labels[i] in top2[i] for i in range(5)])
    assert topk_accuracy(probs, labels, 2) == expect == 0.8
    assert topk_accuracy(probs, labels, 1) == 0.2


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(1, 30), st.integers(0, 10_000))
def test_topk_monotone_and_exhaustive(k, n, seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(k), n)
    labels = rng.integers(0, k, n)
    accs = [topk_accuracy(probs, labels, j) for j in range(1, k + 1)]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 1.0
    for j in range(1, k + 1):
        brute = np.mean([sum(probs[i] > probs[i, labels[i]]) < j for i in range(n)])
        assert accs[j - 1] == brute


# ---------------------------------------------------------------- reports

def test_perfect_predictor_report(tmp_path):
    labels = np.repeat(np.arange(15), 4)
    probs = np.eye(15)[labels]
    rep = evaluate_predictions(probs, labels, [f"c{i}" for i in range(15)])
    assert np.array_equal(rep.confusion, np.diag(np.full(15, 4)))
    assert rep.overall_accuracy == rep.average_accuracy == 1.0
    assert np.all(rep.f_score == 1.0) and np.all(rep.auc == 1.0)
    assert rep.top1 == rep.top2 == 1.0
    assert rep.confidence_incorrect.count == 0
    files = rep.write(tmp_path)
    with (tmp_path / "confusion.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 225
    assert sum(int(r["count"]) for r in rows) == 60
    assert any(p.name == "summary.txt" for p in files)


def test_random_predictor_near_chance():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(15), 200)
    rep = evaluate_predictions(rng.random((3000, 15)), labels, [str(i) for i in range(15)])
    lo, hi = stats.binom.interval(0.999, 3000, 1 / 15)
    assert lo / 3000 <= rep.overall_accuracy <= hi / 3000
    assert rep.top2 >= rep.top1


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(1, 60), st.integers(0, 10_000))
def test_report_consistency(k, n, seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(k), n)
    labels = rng.integers(0, k, n)
    rep = evaluate_predictions(probs, labels, [str(i) for i in range(k)])
    pred = np.argmax(probs, axis=1)
    assert rep.overall_accuracy == np.mean(pred == labels)
    assert rep.overall_accuracy == np.trace(rep.confusion) / rep.total
    rows = rep.confusion.sum(axis=1)
    per = [rep.confusion[i, i] / rows[i] for i in range(k) if rows[i]]
    assert abs(rep.average_accuracy - np.mean(per)) < 1e-12
    assert rep.top2 >= rep.top1
    assert np.array_equal(rows, np.bincount(labels, minlength=k))


def test_empty_test_set_rejected():
    with pytest.raises(ValueError):
        evaluate_predictions(np.zeros((0, 3)), np.zeros(0, int), "abc")


# ---------------------------------------------------------------- voting

def test_plurality_vote():
    probs = np.array([[0.1, 0.9, 0], [0.2, 0.8, 0], [0.1, 0.0, 0.9]])
    vote = majority_vote(probs)
    assert vote.label == 1 and vote.tally.tolist() == [0, 2, 1]


def test_vote_tie_breaks():
    # one vote each for classes 0 and 2; class 2 has more summed probability
    probs = np.array([[0.6, 0.0, 0.4], [0.05, 0.0, 0.95]])
    assert majority_vote(probs).label == 2
    # full symmetry falls back to the lowest index
    assert majority_vote(np.array([[0.6, 0.4], [0.4, 0.6]])).label == 0


def test_single_frame_vote_is_argmax():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = rng.dirichlet(np.ones(6))
        assert majority_vote(p[None]).label == int(np.argmax(p))
    with pytest.raises(ValueError):
        majority_vote(np.zeros((0, 3)))


def test_binomial_tail_against_scipy():
    exact = sum(math.comb(11, k) * 0.1 ** k * 0.9 ** (11 - k) for k in range(6, 12))
    assert abs(binomial_majority_error(0.1, 11) - exact) < 1e-15
    assert abs(exact - stats.binom.sf(5, 11, 0.1)) < 1e-15
    assert abs(exact - 2.9570608e-4) < 1e-12
    # the quoted approximation of 2.97e-4 agrees to within 1%
    assert abs(exact - 2.97e-4) / 2.97e-4 < 0.01
    # error shrinks geometrically with more frames
    errs = [binomial_majority_error(0.1, n) for n in (1, 3, 5, 7, 9, 11)]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_simulated_vote_matches_binomial_tail():
    p_err = binomial_majority_error(0.2, 7)
    errors = simulate_vote_errors(0.2, 7, 20_000, rng=np.random.default_rng(3))
    se = math.sqrt(p_err * (1 - p_err) / len(errors))
    assert abs(errors.mean() - p_err) <= 3 * se
