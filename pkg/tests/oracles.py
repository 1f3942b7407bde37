"""Brute-force reference implementations used by the metric and geometry tests."""
from __future__ import annotations

import numpy as np

from wccn.boxes import Box


def pixel_iou(a: Box, b: Box) -> float:
    """Count covered pixels on a grid."""
    size = max(a.x1, b.x1, a.y1, b.y1) + 1
    ma = np.zeros((size, size), bool)
    mb = np.zeros((size, size), bool)
    ma[a.y0:a.y1, a.x0:a.x1] = True
    mb[b.y0:b.y1, b.x0:b.x1] = True
    return (ma & mb).sum() / (ma | mb).sum()


def nms(boxes, thr):
    """Fixed-point characterization: a box survives iff no surviving higher-priority box overlaps it."""
    prio = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    alive = {}
    for rank, i in enumerate(prio):
        alive[i] = all(not alive[j] or pixel_iou(boxes[i], boxes[j]) <= thr for j in prio[:rank])
    return [boxes[i] for i in prio if alive[i]]


def random_box(rng, size=20, score=False, class_id=None):
    x0, y0 = rng.integers(0, size - 1, 2)
    x1, y1 = x0 + rng.integers(1, size - x0 + 1), y0 + rng.integers(1, size - y0 + 1)
    return Box(int(x0), int(y0), int(x1), int(y1), class_id=class_id,
               score=float(rng.integers(0, 5)) / 4 if score else None)


def ap_from_flags(flags, npos, mode="all"):
    """AP of a ranked list of TP/FP flags by summing interpolated precision at each recall step."""
    flags = list(flags)
    prec = [sum(flags[:k + 1]) / (k + 1) for k in range(len(flags))]
    rec = [sum(flags[:k + 1]) / npos for k in range(len(flags))]
    if mode == "voc11":
        total = 0.0
        for t in [i / 10 for i in range(11)]:
            cands = [p for p, r in zip(prec, rec) if r >= t - 1e-12]
            total += max(cands) if cands else 0.0
        return total / 11
    return sum(max(prec[k:]) for k, f in enumerate(flags) if f) / npos


def detection_ap(dets, gt, num_classes, iou_min=0.5, mode="all"):
    """dets/gt: {image: [Box]}. Each detection takes its best-IoU GT; reuse is a false positive."""
    out = {}
    for c in range(1, num_classes + 1):
        g = {k: [b for b in v if b.class_id == c] for k, v in gt.items()}
        npos = sum(map(len, g.values()))
        if not npos:
            continue
        ranked = []
        for k in list(gt) + [k for k in dets if k not in gt]:
            ranked += [(b.score, k, b) for b in dets.get(k, []) if b.class_id == c]
        ranked.sort(key=lambda t: -t[0])  # stable
        used = set()
        flags = []
        for _, k, b in ranked:
            best, bj = -1.0, None
            for j, gb in enumerate(g.get(k, [])):
                v = pixel_iou(b, gb)
                if v > best:
                    best, bj = v, j
            ok = bj is not None and best >= iou_min and (k, bj) not in used
            if ok:
                used.add((k, bj))
            flags.append(ok)
        out[c] = ap_from_flags(flags, npos, mode)
    return out


def corloc(top, gt, num_classes, iou_min=0.5):
    hits, tot = [0] * (num_classes + 1), [0] * (num_classes + 1)
    for k, per in top.items():
        for c, b in per.items():
            tot[c] += 1
            hits[c] += b is not None and any(g.class_id == c and pixel_iou(b, g) >= iou_min for g in gt[k])
    return {c: hits[c] / tot[c] for c in range(1, num_classes + 1) if tot[c]}


def classification_ap(scores, labels):
    out = {}
    for c in range(labels.shape[1]):
        pos = labels[:, c] > 0
        if pos.any():
            order = sorted(range(len(pos)), key=lambda i: -scores[i, c])
            out[c + 1] = ap_from_flags([bool(pos[i]) for i in order], int(pos.sum()))
    return out


def inverted_ap(n: int, p: int) -> float:
    """All p positives ranked after the n - p negatives.

    Precision rises along the tail, so the interpolated value at every recall
    level is the final precision p / n.
    """
    raw = [i / (n - p + i) for i in range(1, p + 1)]
    return sum(max(raw[k:]) for k in range(p)) / p
