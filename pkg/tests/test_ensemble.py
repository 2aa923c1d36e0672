import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subseg.ensemble import FUSION_KINDS, FusionStrategy, fuse, fused_prediction, mask_bounds
from subseg.errors import FusionError, ValidationError
from subseg.kernels import Instance
from subseg.segmenter import PredictionSet

H, W = 12, 10


def inst(r0, r1, c0, c1, score):
    m = np.zeros((H, W), dtype=bool)
    m[r0:r1, c0:c1] = True
    return Instance(mask_bounds(m), score, m)


def pset(stream, *instances, z=0):
    return PredictionSet("c", z, stream, (H, W), list(instances))


@pytest.mark.parametrize("kind", FUSION_KINDS)
def test_self_fusion_returns_top_mask(kind):
    a = inst(1, 4, 1, 4, 0.8)
    p = pset("t1", a, inst(6, 9, 6, 9, 0.3))
    # for the vote, a's share of the score mass is 0.8/1.1, above 0.5
    out = fuse(p, pset("t2", *p.instances), FusionStrategy(kind))
    np.testing.assert_array_equal(out, a.mask)


def test_max_score_picks_confident_stream():
    a, b = inst(0, 3, 0, 3, 0.9), inst(5, 9, 5, 9, 0.6)
    np.testing.assert_array_equal(fuse(pset("t1", a), pset("t2", b)), a.mask)
    np.testing.assert_array_equal(fuse(pset("t1", b), pset("t2", a)), a.mask)


def test_union_of_disjoint():
    a, b = inst(0, 3, 0, 3, 0.9), inst(5, 9, 5, 9, 0.6)
    out = fuse(pset("t1", a), pset("t2", b), FusionStrategy("mask_union"))
    np.testing.assert_array_equal(out, a.mask | b.mask)


def test_vote_threshold():
    a, b = inst(0, 4, 0, 4, 0.6), inst(2, 6, 2, 6, 0.4)
    out = fuse(pset("t1", a), pset("t2", b), FusionStrategy("score_weighted_vote", 0.5))
    np.testing.assert_array_equal(out, a.mask)
    out = fuse(pset("t1", a), pset("t2", b), FusionStrategy("score_weighted_vote", 1.0))
    np.testing.assert_array_equal(out, a.mask & b.mask)


@pytest.mark.parametrize("kind", FUSION_KINDS)
def test_empty_neutral(kind):
    a = inst(2, 5, 3, 8, 0.7)
    s = FusionStrategy(kind)
    np.testing.assert_array_equal(fuse(pset("t1", a), pset("t2"), s), a.mask)
    np.testing.assert_array_equal(fuse(pset("t1"), pset("t2", a), s), a.mask)
    assert not fuse(pset("t1"), pset("t2"), s).any()


def test_mismatch_errors():
    with pytest.raises(FusionError):
        fuse(pset("t1", z=0), pset("t2", z=1))
    other = PredictionSet("c", 0, "t2", (H + 1, W), [Instance(mask_bounds(np.ones((H + 1, W), bool)), 0.5, np.ones((H + 1, W), bool))])
    with pytest.raises(FusionError):
        fuse(pset("t1", inst(0, 2, 0, 2, 0.5)), other)
    with pytest.raises(FusionError):
        fuse(PredictionSet("c", 0, "t1", (0, 0)), PredictionSet("c", 0, "t2", (0, 0)))


def test_strategy_validation():
    with pytest.raises(ValidationError):
        FusionStrategy("average")
    with pytest.raises(ValidationError):
        FusionStrategy("score_weighted_vote", 0.0)


rects = st.tuples(st.integers(0, H - 1), st.integers(1, H), st.integers(0, W - 1), st.integers(1, W), st.floats(0.01, 1)).filter(
    lambda t: t[0] < t[1] and t[2] < t[3]
)


@settings(max_examples=150, deadline=None)
@given(st.lists(rects, max_size=3), st.lists(rects, max_size=3), st.sampled_from(FUSION_KINDS))
def test_fusion_properties(r1, r2, kind):
    p1 = pset("t1", *(inst(*r) for r in r1))
    p2 = pset("t2", *(inst(*r) for r in r2))
    s = FusionStrategy(kind)
    out = fuse(p1, p2, s)
    union = np.zeros((H, W), bool)
    for i in p1.instances + p2.instances:
        union |= i.mask
    assert not (out & ~union).any()
    scores = [i.score for i in p1.instances + p2.instances]
    if len(set(scores)) == len(scores):
        # without exact score ties, stream order does not matter
        np.testing.assert_array_equal(fuse(pset("t1", *p2.instances), pset("t2", *p1.instances), s), out)


def test_fused_prediction_record():
    a, b = inst(0, 3, 0, 3, 0.9), inst(5, 9, 5, 9, 0.6)
    fp = fused_prediction(pset("t1", a), pset("t2", b), FusionStrategy("mask_union"))
    assert fp.stream_id == "fused" and len(fp.instances) == 1
    assert fp.instances[0].score == 0.9
    assert tuple(fp.instances[0].box) == (0, 0, 9, 9)
    assert fused_prediction(pset("t1"), pset("t2")).instances == []
