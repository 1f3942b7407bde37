import json

import numpy as np
import pytest
from scipy import ndimage

from wccn import autodiff as ad
from wccn.boxes import Box, iou
from wccn.cam import (CAM, build_pseudo_seg_gt, cam_to_boxes, dump_cam, extract_cam,
                      select_candidate_indices, select_candidates)
from wccn.raster import read_pgm


def cam_of(*maps):
    m = np.stack(maps).astype(float)
    return CAM(m, tuple(range(1, len(maps) + 1)), (m.shape[2], m.shape[1]))


def test_extract_cam_constant_and_gap_consistency():
    rng = np.random.default_rng(0)
    acts = rng.standard_normal((3, 8, 8))
    acts[1] = 2.5
    cam = extract_cam(acts, [2, 3], (32, 32))
    assert np.all(cam.channel(2) == 2.5)
    logits = ad.global_avg_pool(ad.Tensor(acts[None])).data[0]
    for c in (2, 3):
        assert abs(cam.head_maps[cam.class_ids.index(c)].mean() - logits[c - 1]) < 1e-9


def test_extract_cam_nearest_block_oracle():
    a = np.zeros((1, 8, 8))
    a[0, 2:4, 5:7] = 1.0
    up = extract_cam(a, [1], (64, 64)).channel(1)
    expected = np.zeros((64, 64))
    expected[16:32, 40:56] = 1.0
    assert np.array_equal(up, expected)


def test_cam_to_boxes_single_rectangle():
    m = np.zeros((20, 20))
    m[3:9, 5:15] = 4.0
    assert cam_to_boxes(cam_of(m), 1, 0.2) == [Box(5, 3, 15, 9, class_id=1, score=4.0)]


def test_cam_to_boxes_two_blobs_brighter_first():
    m = np.zeros((20, 20))
    m[1:4, 1:4] = 2.0
    m[10:15, 12:18] = 5.0
    boxes = cam_to_boxes(cam_of(m), 1, 0.2)
    assert [b.coords() for b in boxes] == [(12, 10, 18, 15), (1, 1, 4, 4)]


def test_cam_to_boxes_flat_positive_and_nonpositive():
    assert [b.coords() for b in cam_to_boxes(cam_of(np.full((6, 7), 0.3)), 1)] == [(0, 0, 7, 6)]
    assert cam_to_boxes(cam_of(np.full((6, 7), -1.0)), 1) == []
    assert cam_to_boxes(cam_of(np.zeros((6, 7))), 1) == []
    with pytest.raises(ValueError):
        cam_to_boxes(cam_of(np.ones((3, 3))), 1, 1.0)


def test_cam_to_boxes_matches_component_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        m = ndimage.gaussian_filter(rng.standard_normal((16, 16)), 1.5)
        boxes = cam_to_boxes(cam_of(m), 1, 0.4)
        if m.max() <= 0:
            assert boxes == []
            continue
        mask = m >= 0.4 * m.max()
        lab, n = ndimage.label(mask, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        assert len(boxes) == n
        peaks = sorted((m[lab == k].max() for k in range(1, n + 1)), reverse=True)
        assert [b.score for b in boxes] == peaks
        for b in boxes:
            assert 0 <= b.x0 < b.x1 <= 16 and 0 <= b.y0 < b.y1 <= 16


def test_select_candidates_against_sort_oracle():
    cam_box = Box(2, 2, 10, 10)
    props = [Box(0, 0, 4, 4), Box(2, 2, 10, 10), Box(3, 3, 9, 9), Box(2, 2, 9, 10), Box(20, 20, 25, 25),
             Box(0, 0, 12, 12)]
    ious = [iou(cam_box, p) for p in props]
    for k in range(1, 8):
        expected = sorted(range(len(props)), key=lambda j: (-ious[j], j))[:k]
        assert select_candidate_indices([cam_box], props, k) == expected
    assert select_candidates([cam_box], props, 1) == [props[1]]
    assert len(select_candidates([cam_box], props, 50)) == len(props)


def test_select_candidates_union_bound_and_membership():
    rng = np.random.default_rng(2)
    for _ in range(100):
        props = [Box(int(x), int(y), int(x) + 5, int(y) + 6) for x, y in rng.integers(0, 20, (12, 2))]
        cams = [Box(int(x), int(y), int(x) + 8, int(y) + 4) for x, y in rng.integers(0, 20, (3, 2))]
        out = select_candidates(cams, props, 3)
        assert len(out) <= 3 * len(cams)
        assert all(p in props for p in out)


def test_pseudo_seg_single_blob():
    m = np.zeros((8, 8))
    m[2:5, 3:6] = 1.0
    m[3, 4] = 2.0
    p = build_pseudo_seg_gt(cam_of(m, np.zeros((8, 8))), [1, 0], 0.2)
    fg = m >= 0.4
    assert np.array_equal(p.G == 1, fg) and np.all(p.G[~fg] == 3)
    assert p.peaks == {1: 3 * 8 + 4}
    assert p.alpha.flat[p.peaks[1]] == 1.0
    in_s = np.zeros(64, bool)
    in_s[p.I_s] = True
    assert np.all(p.alpha.reshape(-1)[~in_s] == 0)
    assert np.all(in_s[fg.reshape(-1)])
    bg = np.flatnonzero(~fg.reshape(-1))
    assert np.array_equal(np.intersect1d(p.I_s, bg), bg[::16])


def test_pseudo_seg_two_classes_disjoint_blobs():
    a, b = np.zeros((10, 10)), np.zeros((10, 10))
    a[1:3, 1:3] = 1.0
    b[6:9, 5:9] = 3.0
    p = build_pseudo_seg_gt(cam_of(a, b), [1, 1], 0.5)
    assert set(np.unique(p.G)) == {1, 2, 3}
    assert p.G.flat[p.peaks[1]] == 1 and p.G.flat[p.peaks[2]] == 2
    assert 0 <= p.alpha.min() and p.alpha.max() <= 1


def test_pseudo_seg_overlap_higher_class_wins():
    a = np.ones((4, 4))
    p = build_pseudo_seg_gt(cam_of(a, a), [1, 1], 0.2)
    assert np.all(p.G == 2)


def test_dump_cam_writes_pgm_and_sidecar(tmp_path):
    m = np.arange(12.0).reshape(3, 4)
    files = dump_cam(cam_of(m), tmp_path, "img")
    pgm = read_pgm(tmp_path / "img_class1.pgm")
    assert pgm.min() == 0 and pgm.max() == 255 and pgm.shape == (3, 4)
    side = json.loads((tmp_path / "img_cam.json").read_text())
    assert side["classes"]["1"]["max"] == 11.0 and len(files) == 2
