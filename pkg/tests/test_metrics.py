import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import pixel_counts
from subseg.errors import EmptyAggregateError, IncomparableRunsError, ShapeError
from subseg.metrics import (
    MetricsReport,
    SliceMetrics,
    aggregate,
    compare_runs,
    read_report,
    report_text,
    slice_metrics,
    write_report,
)

masks = hnp.arrays(bool, st.tuples(st.integers(1, 16), st.integers(1, 16)))


def mask_pair():
    return masks.flatmap(lambda a: st.tuples(st.just(a), hnp.arrays(bool, a.shape)))


def test_identical_masks():
    m = np.zeros((5, 5), bool)
    m[1:3, 1:4] = True
    s = slice_metrics(m, m)
    assert (s.precision, s.recall, s.dice) == (1.0, 1.0, 1.0)


def test_both_empty_is_perfect():
    s = slice_metrics(np.zeros((3, 3)), np.zeros((3, 3)))
    assert (s.tp, s.fp, s.fn) == (0, 0, 0)
    assert (s.precision, s.recall, s.dice) == (1.0, 1.0, 1.0)


def test_half_overlap():
    pred = np.zeros((4, 4), bool)
    gt = np.zeros((4, 4), bool)
    pred[0, :] = True
    gt[0, 2:] = True
    gt[1, :2] = True
    s = slice_metrics(pred, gt)
    assert (s.tp, s.fp, s.fn) == (2, 2, 2)
    assert s.precision == s.recall == s.dice == 0.5


def test_prediction_on_empty_gt():
    s = SliceMetrics(0, 5, 0)
    assert s.precision == 0.0 and s.recall == 1.0 and s.dice == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        slice_metrics(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=300)
@given(mask_pair())
def test_counts_match_brute_force(pair):
    pred, gt = pair
    s = slice_metrics(pred, gt)
    assert (s.tp, s.fp, s.fn) == pixel_counts(pred, gt)


@settings(max_examples=300)
@given(mask_pair())
def test_dice_is_harmonic_mean(pair):
    s = slice_metrics(*pair)
    p, r = s.precision, s.recall
    if s.tp:
        assert s.dice == pytest.approx(2 * p * r / (p + r), abs=1e-12)


@settings(max_examples=200)
@given(mask_pair())
def test_dice_symmetric(pair):
    pred, gt = pair
    a, b = slice_metrics(pred, gt), slice_metrics(gt, pred)
    assert a.dice == b.dice
    assert a.precision == b.recall


@settings(max_examples=200)
@given(mask_pair(), st.data())
def test_adding_true_positives_never_lowers_dice(pair, data):
    pred, gt = pair
    missed = np.argwhere(gt & ~pred)
    if len(missed) == 0:
        return
    r, c = missed[data.draw(st.integers(0, len(missed) - 1))]
    better = pred.copy()
    better[r, c] = True
    assert slice_metrics(better, gt).dice >= slice_metrics(pred, gt).dice


def test_aggregate_mean():
    rep = aggregate([SliceMetrics(1, 1, 0), SliceMetrics(2, 0, 0), SliceMetrics(0, 0, 0)])
    assert rep.n_slices == 3
    assert rep.mean_precision == pytest.approx((0.5 + 1 + 1) / 3)
    assert rep.mean_dice == pytest.approx((2 / 3 + 1 + 1) / 3)


def test_aggregate_skip_empty_gt():
    items = [SliceMetrics(1, 1, 0), SliceMetrics(0, 3, 0)]
    assert aggregate(items).mean_dice == pytest.approx(1 / 3)
    rep = aggregate(items, skip_empty_gt=True)
    assert rep.n_slices == 1 and rep.mean_dice == pytest.approx(2 / 3)


def test_aggregate_nothing_left():
    with pytest.raises(EmptyAggregateError):
        aggregate([])
    with pytest.raises(EmptyAggregateError):
        aggregate([SliceMetrics(0, 2, 0)], skip_empty_gt=True)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50)), min_size=1, max_size=40))
def test_aggregate_matches_recomputation(counts):
    per = [(("c", i), SliceMetrics(*t)) for i, t in enumerate(counts)]
    rep = aggregate(per)
    dice = [2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0 for tp, fp, fn in counts]
    assert abs(rep.mean_dice - sum(dice) / len(dice)) <= 1e-12
    # fsum makes the mean independent of slice order
    assert aggregate(per[::-1]).mean_dice == rep.mean_dice


def _report(p, r, d, keys=(("c", 0),)):
    return MetricsReport(len(keys), p, r, d, [(k, SliceMetrics(1, 0, 0)) for k in keys])


def test_compare_reference_table():
    sub = _report(0.79, 0.72, 0.75)
    raw = _report(0.70, 0.69, 0.69)
    cmp = compare_runs(sub, raw, ("Image Subtraction", "Normal"))
    for got, want in zip(cmp.deltas, (0.09, 0.03, 0.06)):
        assert got == pytest.approx(want, abs=1e-12)
    text = cmp.format()
    assert "Image Subtraction" in text and "+0.0900" in text


def test_compare_self_is_zero():
    rep = aggregate([(("a", 0), SliceMetrics(3, 1, 2)), (("a", 1), SliceMetrics(0, 0, 4))])
    assert compare_runs(rep, rep).deltas == (0.0, 0.0, 0.0)


def test_compare_disjoint_keys():
    with pytest.raises(IncomparableRunsError) as info:
        compare_runs(_report(1, 1, 1, [("a", 0), ("a", 1)]), _report(1, 1, 1, [("a", 0), ("b", 5)]))
    assert info.value.n_diff == 2


def test_report_roundtrip(tmp_path):
    rep = aggregate(
        [(("b", 2), SliceMetrics(3, 1, 0)), (("a", 7), SliceMetrics(0, 0, 0))],
        config_fingerprint="seed=1",
    )
    write_report(rep, tmp_path / "r.txt")
    text = (tmp_path / "r.txt").read_text()
    assert text.splitlines()[:2] == ["SUBSEGREPORT v1", "n_slices=2"]
    assert "mean_dice=0.928571" in text
    assert text.splitlines()[-2:] == ["a,7,0,0,0", "b,2,3,1,0"]
    back = read_report(tmp_path / "r.txt")
    assert back == rep
    assert report_text(back) == text
    assert math.isclose(back.micro().dice, 6 / 7)
