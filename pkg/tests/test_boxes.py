import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wccn.boxes import Box, iou, iou_matrix, nms, nms_per_class, rescale_box
from oracles import nms as oracle_nms, pixel_iou, random_box


def test_iou_known_values():
    assert iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)) == pytest.approx(1 / 7, abs=1e-12)
    assert iou(Box(0, 0, 4, 4), Box(0, 0, 4, 4)) == 1.0
    assert iou(Box(0, 0, 4, 4), Box(4, 0, 8, 4)) == 0.0


def test_iou_matches_pixel_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a, b = random_box(rng), random_box(rng)
        assert iou(a, b) == pixel_iou(a, b)
        assert iou_matrix([a], [b])[0, 0] == iou(a, b)


def test_nms_matches_oracle_on_random_instances():
    rng = np.random.default_rng(1)
    for trial in range(1000):
        boxes = [random_box(rng, 12, score=True) for _ in range(rng.integers(1, 11))]
        thr = float(rng.choice([0.0, 0.3, 0.5, 0.7]))
        assert nms(boxes, thr) == oracle_nms(boxes, thr), trial


def test_nms_basic_cases():
    b = Box(0, 0, 5, 5, score=0.9)
    assert nms([b], 0.5) == [b]
    assert nms([b, b.with_(score=0.8)], 0.5) == [b]


def test_nms_per_class_keeps_classes_apart():
    a = Box(0, 0, 5, 5, class_id=1, score=0.9)
    b = a.with_(class_id=2, score=0.5)
    assert nms_per_class([a, b], 0.3) == [a, b]


box_st = st.tuples(st.integers(0, 15), st.integers(0, 15), st.integers(1, 8), st.integers(1, 8),
                   st.floats(0, 1)).map(lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3], score=t[4]))


@settings(max_examples=200, deadline=None)
@given(st.lists(box_st, min_size=1, max_size=10), st.sampled_from([0.2, 0.5]))
def test_nms_properties(boxes, thr):
    kept = nms(boxes, thr)
    assert all(iou(a, b) <= thr for i, a in enumerate(kept) for b in kept[i + 1:])
    assert nms(kept, thr) == kept


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


def test_box_validation_and_json():
    with pytest.raises(ValueError):
        Box(3, 0, 3, 5)
    with pytest.raises(ValueError):
        Box(0, 0, float("nan"), 5)
    b = Box(1, 2, 3, 4, class_id=2, score=0.25)
    assert b.to_json() == {"x0": 1, "y0": 2, "x1": 3, "y1": 4, "class": 2, "score": 0.25}
    assert Box.from_json(b.to_json()) == b
    assert Box.from_json({"x0": 0, "y0": 0, "x1": 1, "y1": 1}) == Box(0, 0, 1, 1)


def test_rescale_cases():
    assert rescale_box(Box(0, 0, 8, 8), (16, 16), (64, 64)) == Box(0, 0, 32, 32)
    b = Box(3, 5, 11, 14)
    assert rescale_box(b, (20, 20), (20, 20)) == b
    with pytest.raises(ValueError):
        rescale_box(Box(0, 0, 1, 1), (64, 64), (8, 8))


def test_rescale_round_trip_within_one_pixel():
    rng = np.random.default_rng(2)
    for _ in range(500):
        b = random_box(rng, 40)
        if min(b.width, b.height) < 3:
            continue
        up = rescale_box(b, (40, 40), (72, 56))
        back = rescale_box(up, (72, 56), (40, 40))
        assert max(abs(p - q) for p, q in zip(back.coords(), b.coords())) <= 1
