from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsdakit import verify
from fsdakit.dataset import Annotation, BBox
from fsdakit.metrics import Detection, average_precision, iou, iou_matrix, map_suite

# four classes, hand-computed all-points APs:
#   c0: 1 gt, one TP                              -> 1
#   c1: 2 gt, TP .9 / FP .8 / TP .7               -> 1/2 * 1 + 1/2 * 2/3 = 5/6
#   c2: 2 gt, one TP                              -> 1/2
#   c3: 1 gt, FP .95 then TP .6                   -> 1/2
HAND_APS = [Fraction(1), Fraction(5, 6), Fraction(1, 2), Fraction(1, 2)]


def hand_fixture():
    gt = {
        "a": (
            Annotation(0, BBox(0, 0, 10, 10)),
            Annotation(1, BBox(20, 20, 30, 30)),
            Annotation(2, BBox(50, 50, 60, 60)),
        ),
        "b": (
            Annotation(1, BBox(0, 0, 10, 10)),
            Annotation(2, BBox(30, 0, 40, 10)),
            Annotation(3, BBox(60, 60, 80, 80)),
        ),
    }
    dets = [
        Detection("a", 0, BBox(0, 0, 10, 10), 0.8),
        Detection("a", 1, BBox(20, 20, 30, 30), 0.9),
        Detection("a", 1, BBox(70, 70, 80, 80), 0.8),
        Detection("b", 1, BBox(0, 0, 10, 10), 0.7),
        Detection("a", 2, BBox(50, 50, 60, 60), 0.5),
        Detection("b", 3, BBox(0, 60, 10, 70), 0.95),
        Detection("b", 3, BBox(60, 60, 80, 80), 0.6),
    ]
    return dets, gt


def test_iou_examples():
    assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
    assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) == 0.0
    assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_matrix_agrees_with_scalar():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 20, (5, 2))
    a = np.hstack([a, a + rng.uniform(1, 10, (5, 2))])
    b = rng.uniform(0, 20, (4, 2))
    b = np.hstack([b, b + rng.uniform(1, 10, (4, 2))])
    m = iou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(BBox(*a[i]), BBox(*b[j])), abs=1e-15)


def test_single_perfect_detection():
    gt = {"x": (Annotation(0, BBox(1, 1, 5, 5)),)}
    assert average_precision([Detection("x", 0, BBox(1, 1, 5, 5), 0.9)], gt, 0) == 1.0


def test_no_detections():
    assert average_precision([], {"x": (Annotation(0, BBox(1, 1, 5, 5)),)}, 0) == 0.0


def test_empty_gt_class():
    assert average_precision([Detection("x", 1, BBox(1, 1, 5, 5), 0.3)], {"x": ()}, 1) == 0.0
    assert average_precision([], {"x": ()}, 1) is None


def test_interleaved_matches_bruteforce():
    gt = {"x": (Annotation(0, BBox(0, 0, 10, 10)), Annotation(0, BBox(20, 0, 30, 10)))}
    dets = [
        Detection("x", 0, BBox(0, 0, 10, 10), 0.9),
        Detection("x", 0, BBox(50, 50, 60, 60), 0.8),
        Detection("x", 0, BBox(20, 0, 30, 10), 0.7),
    ]
    want = verify.ap_bruteforce(
        [(d.image_id, d.bbox.as_tuple(), d.confidence) for d in dets],
        [("x", a.bbox.as_tuple()) for a in gt["x"]],
        0.5,
    )
    assert average_precision(dets, gt, 0) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(5 / 6, abs=1e-12)


def test_hand_fixture_map():
    dets, gt = hand_fixture()
    rep = map_suite(dets, gt, 4)
    for c, want in enumerate(HAND_APS):
        assert rep["per_class"][str(c)]["AP@50"] == pytest.approx(float(want), abs=1e-15)
    assert rep["mAP@50"] == pytest.approx(float(sum(HAND_APS) / 4), abs=1e-15)
    assert rep["recall"] == pytest.approx(5 / 6, abs=1e-15)


def test_perfect_detections():
    gt = {"a": (Annotation(0, BBox(0, 0, 4, 4)), Annotation(1, BBox(5, 5, 9, 9))), "b": (Annotation(1, BBox(1, 1, 3, 3)),)}
    dets = [Detection(k, a.class_id, a.bbox, 0.5) for k, anns in gt.items() for a in anns]
    rep = map_suite(dets, gt, 2)
    assert rep["mAP@50"] == rep["mAP@50:95"] == rep["recall"] == 1.0


def test_class_with_neither_is_excluded():
    gt = {"a": (Annotation(0, BBox(0, 0, 4, 4)),)}
    rep = map_suite([Detection("a", 0, BBox(0, 0, 4, 4), 0.5)], gt, 3)
    assert rep["per_class"]["1"]["AP@50"] is None
    assert rep["mAP@50"] == 1.0


def random_scene(rng):
    gts, dets = [], []
    for img in ("p", "q"):
        for _ in range(int(rng.integers(0, 4))):
            x, y = rng.uniform(0, 30, 2)
            gts.append((img, (x, y, x + rng.uniform(3, 12), y + rng.uniform(3, 12))))
    for _ in range(int(rng.integers(0, 7))):
        img = "p" if rng.random() < 0.5 else "q"
        own = [g for i, g in gts if i == img]
        if own and rng.random() < 0.7:
            b = own[int(rng.integers(len(own)))]
            j = rng.normal(0, 1.5, 4)
            box = (b[0] + j[0], b[1] + j[1], max(b[2] + j[2], b[0] + j[0] + 0.5), max(b[3] + j[3], b[1] + j[1] + 0.5))
        else:
            x, y = rng.uniform(0, 30, 2)
            box = (x, y, x + 5, y + 5)
        dets.append((img, tuple(max(0.0, v) for v in box), float(np.round(rng.uniform(0, 1), 2))))
    return dets, gts


def to_objects(dets, gts):
    d = [Detection(i, 0, BBox(*b), c) for i, b, c in dets]
    g = {"p": [], "q": []}
    for i, b in gts:
        g[i].append(Annotation(0, BBox(*b)))
    return d, g


@given(st.integers(0, 10**6), st.sampled_from([0.3, 0.5, 0.75]))
@settings(max_examples=80, deadline=None)
def test_ap_matches_bruteforce_oracle(seed, thresh):
    dets, gts = random_scene(np.random.default_rng(seed))
    d, g = to_objects(dets, gts)
    got = average_precision(d, g, 0, thresh)
    if not gts:
        assert got == (0.0 if dets else None)
        return
    assert got == pytest.approx(verify.ap_bruteforce(dets, gts, thresh), abs=1e-9)


@given(st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_monotone_confidence_transform(seed):
    dets, gts = random_scene(np.random.default_rng(seed))
    d, g = to_objects(dets, gts)
    squashed = [Detection(x.image_id, 0, x.bbox, x.confidence**3 * 0.5) for x in d]
    assert average_precision(d, g, 0) == average_precision(squashed, g, 0)


@given(st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_ap_non_increasing_in_threshold_and_bounds(seed):
    dets, gts = random_scene(np.random.default_rng(seed))
    d, g = to_objects(dets, gts)
    aps = [average_precision(d, g, 0, t) for t in (0.3, 0.5, 0.7, 0.9)]
    if aps[0] is None:
        return
    assert all(0 <= a <= 1 for a in aps)
    assert all(a >= b - 1e-15 for a, b in zip(aps, aps[1:]))
    rep = map_suite(d, g, 1)
    assert rep["mAP@50:95"] <= rep["mAP@50"] + 1e-15
    assert 0 <= rep["recall"] <= 1


def test_confidence_range_validated():
    with pytest.raises(ValueError):
        Detection("a", 0, BBox(0, 0, 1, 1), 1.5)
