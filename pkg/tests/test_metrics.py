from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtscene.fusion import PanopticMap
from mtscene.metrics import (ConfusionAccumulator, MetricAccumulator, balanced_accuracy, maae, match_segments, miou,
                             panoptic_quality, summarize_pq)

import oracles

CLASSES = range(6)
THINGS = frozenset({2, 3, 4, 5})


def pan(category, instance):
    return PanopticMap(np.asarray(category), np.asarray(instance))


def random_pan(rng, shape=(16, 16), void=True):
    cat = rng.integers(0, 6, size=shape)
    if void:
        cat[rng.uniform(size=shape) < 0.1] = 255
    inst = np.where(np.isin(cat, list(THINGS)), rng.integers(1, 4, size=shape), 0)
    return pan(cat, inst)


def test_miou_examples():
    m = np.array([[0, 0, 1, 1]])
    assert miou(m, m, 2)[0] == 1.0
    value, per = miou(np.array([[0, 1, 1, 1]]), m, 2)
    assert Fraction(value).limit_denominator(100) == Fraction(7, 12)
    assert per == {0: 0.5, 1: 2 / 3}
    # class 2 appears nowhere and is left out of the mean
    assert miou(m, m, 3)[1].keys() == {0, 1}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_miou_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 4, size=(6, 6))
    truth[rng.uniform(size=truth.shape) < 0.2] = 255
    pred = rng.integers(0, 4, size=(6, 6))
    if (truth == 255).all():
        return
    assert miou(pred, truth, 4)[0] == pytest.approx(oracles.confusion_miou(pred, truth, 4), abs=1e-12)


def test_pq_hand_case():
    truth = pan([[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]], [[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]])
    # overlap 3 of union 5 is a match at IoU 0.6; the two-pixel segment is a false positive
    pred = pan([[0, 1, 1, 1, 1, 0, 0, 0, 1, 1]], [[0, 1, 1, 1, 1, 0, 0, 0, 2, 2]])
    stats, matches = match_segments(pred, truth, [0, 1])
    assert (stats[1].tp, stats[1].fp, stats[1].fn) == (1, 1, 0)
    assert stats[1].pq() == Fraction(2, 5)
    assert stats[1].sq() == Fraction(3, 5) and stats[1].rq() == Fraction(2, 3)
    assert summarize_pq(stats, [1]).pq == 0.4
    assert matches == [(1, 1, 1, Fraction(3, 5))]


def test_iou_of_exactly_one_half_is_not_a_match():
    truth = pan([[2, 2, 2, 0]], [[1, 1, 1, 0]])
    pred = pan([[0, 2, 2, 2]], [[0, 1, 1, 1]])
    stats, matches = match_segments(pred, truth, CLASSES)
    assert not matches and (stats[2].fp, stats[2].fn) == (1, 1)


def test_identical_maps_score_one():
    p = random_pan(np.random.default_rng(3))
    res = panoptic_quality(p, p, THINGS, set(CLASSES) - THINGS)
    assert (res.pq, res.sq, res.rq) == (1.0, 1.0, 1.0)


def test_truth_void_pixels_are_ignored():
    truth = pan([[2, 2, 255, 255]], [[1, 1, 0, 0]])
    pred = pan([[2, 2, 3, 3]], [[1, 1, 1, 1]])
    assert panoptic_quality(pred, truth, THINGS, []).pq == 1.0


def test_categories_outside_the_class_set_rejected():
    with pytest.raises(ValueError):
        match_segments(pan([[7]], [[0]]), pan([[0]], [[0]]), CLASSES)


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 100_000))
def test_pq_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    truth = random_pan(rng)
    pred = random_pan(rng) if seed % 3 else truth
    stats, _ = match_segments(pred, truth, CLASSES)
    ref = oracles.panoptic_stats(pred, truth, CLASSES)
    for c in CLASSES:
        s = stats[c]
        assert [s.tp, s.fp, s.fn, s.iou_sum] == ref[c]
        assert s.pq() == s.sq() * s.rq()
    assert summarize_pq(stats).pq == float(oracles.panoptic_quality(pred, truth, CLASSES))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_pq_ignores_instance_labelling(seed):
    rng = np.random.default_rng(seed)
    truth, pred = random_pan(rng), random_pan(rng)
    relabel = np.array([0] + list(rng.permutation(np.arange(5, 8))))
    shuffled = pan(pred.category, relabel[pred.instance])
    a = summarize_pq(match_segments(pred, truth, CLASSES)[0])
    b = summarize_pq(match_segments(shuffled, truth, CLASSES)[0])
    assert a == b


def test_maae_examples():
    assert maae({1: 10.0}, {1: 350.0}, [(1, 1)]) == 20.0
    assert maae({1: 0.0}, {1: 180.0}, [(1, 1)]) == 180.0
    assert maae({1: 45.0, 2: None}, {1: 45.0, 2: 10.0}, [(1, 1), (2, 2)]) == 90.0
    assert maae({}, {}, []) is None


@settings(max_examples=60, deadline=None)
@given(st.floats(-720, 720), st.floats(-720, 720))
def test_angular_error_is_wrapped_and_symmetric(a, b):
    e = maae({1: a}, {1: b}, [(1, 1)])
    assert 0 <= e <= 180
    assert e == pytest.approx(maae({1: b + 360}, {1: a}, [(1, 1)]), abs=1e-9)


def test_balanced_accuracy_examples():
    assert balanced_accuracy([0, 0, 0, 0], [0, 0, 1, 1], 2) == 0.5
    assert balanced_accuracy([0, 1, 1], [0, 1, 1], 4) == 1.0
    # recall of a rare class counts as much as a common one
    assert balanced_accuracy([0] * 9 + [0], [0] * 9 + [1], 2) == 0.5
    with pytest.raises(ValueError):
        balanced_accuracy([], [], 2)


def test_confusion_accumulators_merge():
    rng = np.random.default_rng(0)
    a, b = (rng.integers(0, 3, size=(2, 5, 5)) for _ in range(2))
    whole = ConfusionAccumulator(3)
    whole.add(a, b)
    first, second = ConfusionAccumulator(3), ConfusionAccumulator(3)
    first.add(a[0], b[0])
    second.add(a[1], b[1])
    assert np.array_equal(first.merge(second).matrix, whole.matrix)


def test_metric_accumulator_merge_equals_joint_pass():
    rng = np.random.default_rng(1)
    samples = []
    for _ in range(4):
        truth, pred = random_pan(rng, (8, 8), void=False), random_pan(rng, (8, 8), void=False)
        truth.orientations = {i: float(rng.uniform(0, 360)) for i in range(1, 4)}
        pred.orientations = {i: float(rng.uniform(0, 360)) for i in range(1, 4)}
        samples.append((pred.category, truth.category, pred, truth, int(rng.integers(3)), int(rng.integers(3))))

    def run(batch):
        acc = MetricAccumulator(6, THINGS, 3)
        for s in batch:
            acc.add(*s)
        return acc

    assert run(samples[:2]).merge(run(samples[2:])).report() == run(samples).report()
    text = run(samples).report().to_kv()
    assert text.startswith("semantic_miou=") and "class5.pq=" in text
