import itertools

import numpy as np
import pytest

from wccn.boxes import Box, iou
from wccn.data import Sample
from wccn.proposals import (ProposalConfig, ProposalSet, edge_map, generate_proposals, load_proposals,
                            recall_at_iou, save_proposals, score_windows, sliding_windows)


def sample(pixels):
    return Sample("x", pixels, np.array([1.0, 0.0]), "train")


def square_image(size=32, x=8, y=10, s=12):
    img = np.full((size, size, 3), 20, np.uint8)
    img[y:y + s, x:x + s] = 230
    return img


def test_blank_image_scores_zero_and_index_order():
    cfg = ProposalConfig(cap=40)
    ps = generate_proposals(sample(np.full((32, 32, 3), 90, np.uint8)), cfg)
    assert all(b.score == 0.0 for b in ps.boxes)
    windows = sliding_windows(32, 32, cfg)[:40]
    assert [b.coords() for b in ps.boxes] == [tuple(map(int, w)) for w in windows]


def test_cap_is_exact():
    ps = generate_proposals(sample(square_image()), ProposalConfig(cap=5))
    assert len(ps) == 5


def test_windows_in_bounds_and_scores_in_unit_range():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (40, 48, 3)).astype(np.uint8)
    ps = generate_proposals(sample(img))
    assert len(ps) <= ProposalConfig().cap
    for b in ps.boxes:
        assert 0 <= b.x0 < b.x1 <= 48 and 0 <= b.y0 < b.y1 <= 40
        assert 0.0 <= b.score <= 1.0


def test_single_square_best_window_matches_exhaustive_oracle():
    """Score every integer window directly from the edge map and compare the winner."""
    img = square_image(24, x=6, y=5, s=10)
    edges = edge_map(img)
    cfg = ProposalConfig(scales=(0.3, 0.45, 0.6), stride_frac=0.125)
    windows = sliding_windows(24, 24, cfg)
    fast = score_windows(edges, windows, cfg.band_frac)

    def direct(w):
        x0, y0, x1, y1 = map(int, w)
        band = max(1, int(round(cfg.band_frac * min(x1 - x0, y1 - y0))))
        inside = edges[y0:y1, x0:x1].sum()
        outer = edges[max(y0 - band, 0):y1 + band, max(x0 - band, 0):x1 + band].sum()
        return (inside - (outer - inside)) / (2.0 * ((x1 - x0) + (y1 - y0)))

    raw = np.array([direct(w) for w in windows])
    assert np.allclose(fast, np.clip(raw / raw.max(), 0, 1), atol=1e-12)
    best = Box(*map(int, windows[int(np.argmax(raw))]))
    assert iou(best, Box(6, 5, 16, 15)) >= 0.5
    top = generate_proposals(sample(img), cfg).boxes[0]
    assert iou(top, Box(6, 5, 16, 15)) >= 0.5


def test_determinism():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (32, 32, 3)).astype(np.uint8)
    assert generate_proposals(sample(img)).boxes == generate_proposals(sample(img.copy())).boxes


def test_recall_cases():
    gt = [Box(0, 0, 10, 10), Box(20, 20, 30, 30), Box(40, 0, 50, 10)]
    props = [Box(0, 0, 10, 11), Box(21, 21, 30, 30), Box(0, 30, 5, 35)]
    assert recall_at_iou(props, gt, 0.5) == pytest.approx(2 / 3)
    assert recall_at_iou(gt + props, gt, 0.5) == 1.0
    assert recall_at_iou([], gt) == 0.0
    with pytest.raises(ValueError):
        recall_at_iou(props, [])


def test_recall_monotone_in_threshold():
    rng = np.random.default_rng(4)
    for _ in range(50):
        boxes = [Box(int(x), int(y), int(x) + int(w), int(y) + int(h))
                 for x, y, w, h in rng.integers(1, 12, (8, 4))]
        gt, props = boxes[:3], boxes[3:]
        vals = [recall_at_iou(props, gt, t) for t in np.linspace(0, 1, 11)]
        assert all(a >= b for a, b in itertools.pairwise(vals))


def test_proposal_file_round_trip(tmp_path):
    sets = [ProposalSet("a", [Box(0, 0, 3, 3, score=0.5)]), ProposalSet("b", [])]
    p = tmp_path / "p.jsonl"
    save_proposals(p, sets)
    back = load_proposals(p)
    assert back["a"].boxes == sets[0].boxes and back["b"].boxes == []
    p.write_text(p.read_text() + "{not json\n")
    with pytest.raises(ValueError, match=":3:"):
        load_proposals(p)
