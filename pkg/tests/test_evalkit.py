import numpy as np
import pytest

from conftest import jittered, random_box
from sabl import evalkit as E
from sabl.geometry import Box, iou


def brute_nms(boxes, scores, thr):
    """Plain-Python greedy NMS: rank by (-score, index), keep unless a kept box overlaps > thr."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou(Box.from_seq(boxes[i]), Box.from_seq(boxes[j])) <= thr for j in keep):
            keep.append(i)
    return keep


def random_dets(rng, n):
    xy = rng.uniform(0, 60, (n, 2))
    b = np.hstack([xy, xy + rng.uniform(5, 40, (n, 2))])
    # coarse scores force ties
    return b, np.round(rng.uniform(size=n), 1)


def test_nms_examples():
    assert E.nms(np.array([[0, 0, 1, 1.0]]), np.array([0.5])) == [0]
    two = np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]])
    assert E.nms(two, np.array([0.9, 0.8]), 0.5) == [0]
    assert E.nms(np.zeros((0, 4)), np.zeros(0)) == []
    with pytest.raises(ValueError):
        E.nms(two, np.array([0.9, 0.8]), 1.0)


def test_nms_matches_oracle(rng):
    for _ in range(300):
        n = int(rng.integers(1, 21))
        b, s = random_dets(rng, n)
        thr = float(rng.uniform(0.1, 0.9))
        assert E.nms(b, s, thr) == brute_nms(b, s, thr)


def test_rescoring_nms():
    b = np.array([[0, 0, 10, 10], [1, 0, 11, 10.0]])
    keep, _ = E.nms(b, np.array([0.8, 0.7]), 0.5), None
    assert keep == [0]
    keep, sc = E.rescoring_nms(b, np.array([0.8, 0.7]), np.array([0.5, 0.9]), 0.5)
    assert keep == [1] and sc == pytest.approx([0.4, 0.63])
    keep, sc = E.rescoring_nms(np.zeros((0, 4)), np.zeros(0), np.zeros(0))
    assert keep == [] and len(sc) == 0


def test_rescoring_unit_confidence_identical(rng):
    for _ in range(100):
        b, s = random_dets(rng, 15)
        keep, sc = E.rescoring_nms(b, s, np.ones(15), 0.5)
        assert keep == E.nms(b, s, 0.5) and np.array_equal(sc, s)


def test_ap_examples():
    gt = [np.array([[0, 0, 10, 10.0]])]
    assert E.average_precision([(gt[0], np.array([0.9]))], gt, 0.5).ap == 1.0
    assert E.average_precision([(np.zeros((0, 4)), np.zeros(0))], gt, 0.5).ap == 0.0
    # 2 gts; ranked TP, FP, TP: precision 1 up to recall 0.5, then 2/3 up to recall 1
    gts = [np.array([[0, 0, 10, 10], [50, 50, 60, 60.0]])]
    dets = [(np.array([[0, 0, 10, 10], [100, 100, 110, 110], [50, 50, 60, 60.0]]), np.array([0.9, 0.8, 0.7]))]
    assert E.average_precision(dets, gts, 0.5).ap == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-12)


def test_ap_duplicate_is_false_positive():
    gts = [np.array([[0, 0, 10, 10.0]])]
    dets = [(np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]]), np.array([0.9, 0.8]))]
    r = E.average_precision(dets, gts, 0.5)
    assert r.ap == 1.0 and r.precision.tolist() == [1.0, 0.5]


def test_ap_monotone_score_invariance(rng):
    gts, dets = [], []
    for _ in range(10):
        g = np.array([random_box(rng).to_list() for _ in range(3)])
        d = np.array([jittered(rng, Box.from_seq(x)).to_list() for x in g for _ in range(2)])
        gts.append(g)
        dets.append((d, rng.uniform(size=len(d))))
    for thr in (0.5, 0.75):
        base = E.average_precision(dets, gts, thr)
        assert np.all(np.diff(base.recall) >= 0)
        for f in (lambda s: s ** 3, lambda s: np.exp(5 * s) - 7, lambda s: 0.1 * s):
            other = E.average_precision([(b, f(s)) for b, s in dets], gts, thr)
            assert other.ap == base.ap


def test_iou_improvement_stats():
    gts = [np.array([[0, 0, 10, 10.0]])]
    props = [np.array([[0, 0, 10, 8], [0, 0, 10, 6.5], [0, 0, 10, 4.5]])]
    same = E.iou_improvement_stats(props, props, gts)
    assert [r["bin_lo"] for r in same] == [0.4, 0.6, 0.8]
    assert all(r["iou_before"] == r["iou_after"] for r in same)
    perfect = E.iou_improvement_stats(props, [np.repeat(gts[0], 3, axis=0)], gts)
    assert all(r["iou_after"] == 1.0 for r in perfect)


def test_positive_count_stats():
    gts = [np.array([[0, 0, 10, 10], [20, 20, 30, 30.0]])]
    rows = E.positive_count_stats(gts, gts, (0.5, 0.9))
    assert rows[0]["mean_count"] == rows[1]["mean_count"] == 2.0
    far = [np.array([[100, 100, 110, 110.0]])]
    assert all(r["mean_count"] == 0.0 for r in E.positive_count_stats(far, gts))
    with pytest.raises(ValueError):
        E.positive_count_stats(gts, gts, (0.9, 0.5))


def test_positive_count_nonincreasing(rng):
    gts = [np.array([random_box(rng).to_list() for _ in range(3)]) for _ in range(5)]
    refined = [np.array([jittered(rng, Box.from_seq(g)).to_list() for g in gg for _ in range(3)]) for gg in gts]
    counts = [r["mean_count"] for r in E.positive_count_stats(refined, gts)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_displacement_identity():
    g = np.array([[0, 0, 10, 10], [5, 5, 40, 20.0]])
    d = E.displacement_stats(g, g)
    assert len(d.rows) == 1 and d.rows[0]["bin"] == "[0.9,1.0)"
    assert d.rows[0]["raw_mean"] == 0 and d.rows[0]["raw_var"] == 0
    # the proposal edge sits 0.35 w into the region, 2.88 buckets of 1.7 w / 14, so the
    # nearest centerline is at 2.5 buckets and the residual is a constant fraction of the width
    assert d.rows[0]["bucket_var"] == pytest.approx(0.0, abs=1e-20)
    assert d.rows[0]["bucket_mean"] == pytest.approx((0.35 - 2.5 * 1.7 / 14), abs=1e-12)


def test_displacement_bound(rng):
    props, gts = [], []
    for _ in range(2000):
        g = random_box(rng)
        props.append(jittered(rng, g).to_list())
        gts.append(g.to_list())
    d = E.displacement_stats(np.array(props), np.array(gts), 1.7, 7)
    assert d.n_samples > 1000
    assert d.max_bound_excess <= 0.0
    assert sum(r["count"] for r in d.rows) == d.n_samples


def test_detection_validation():
    with pytest.raises(ValueError):
        E.Detection(Box(0, 0, 1, 1), 1.5)
