"""Detection AP, CorLoc, classification AP and top-1 errors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import Box, iou

AP_MODES = ("all", "voc11")


def _ap_from_pr(recall: np.ndarray, precision: np.ndarray, mode: str = "all") -> float:
    if mode == "voc11":
        return float(np.mean([precision[recall >= t].max() if (recall >= t).any() else 0.0
                              for t in np.linspace(0, 1, 11)]))
    if mode != "all":
        raise ValueError(f"unknown AP mode {mode!r}; expected one of {AP_MODES}")
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    idx = np.flatnonzero(r[1:] != r[:-1]) + 1
    return float(np.sum((r[idx] - r[idx - 1]) * p[idx]))


def ranked_ap(scores: Sequence[float], relevant: Sequence[bool], num_relevant: int | None = None,
              mode: str = "all") -> float:
    """AP of a ranking; ties in score keep input order. ``num_relevant`` defaults to sum(relevant)."""
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevant, dtype=bool)
    npos = int(rel.sum()) if num_relevant is None else num_relevant
    if npos == 0:
        raise ValueError("AP undefined without relevant items")
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(rel[order])
    precision = tp / np.arange(1, len(order) + 1)
    return _ap_from_pr(tp / npos, precision, mode)


def _match_class(dets: list[tuple[float, str, Box]], gt: Mapping[str, list[Box]], iou_min: float) -> np.ndarray:
    """TP flags for detections already sorted by descending score."""
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for i, (_, image_id, box) in enumerate(dets):
        g = gt.get(image_id, [])
        if not g:
            continue
        ious = np.array([iou(box, b) for b in g])
        j = int(np.argmax(ious))  # first index among equal maxima
        if ious[j] >= iou_min and not used[image_id][j]:
            used[image_id][j] = True
            tp[i] = True
    return tp


def detection_ap(detections: Mapping[str, Sequence[Box]], gt: Mapping[str, Sequence[Box]],
                 num_classes: int, iou_min: float = 0.5, mode: str = "all") -> dict[int, float]:
    """Per-class AP (classes 1-based); classes with no GT are absent from the result.

    Each detection matches its highest-IoU GT box of the same class; a second
    detection on an already matched GT is a false positive.
    """
    out: dict[int, float] = {}
    images = list(gt.keys()) + [k for k in detections if k not in gt]
    for c in range(1, num_classes + 1):
        gt_c = {k: [b for b in gt.get(k, []) if b.class_id == c] for k in images}
        npos = sum(len(v) for v in gt_c.values())
        if npos == 0:
            continue
        dets = [(float(b.score if b.score is not None else 0.0), k, b)
                for k in images for b in detections.get(k, []) if b.class_id == c]
        order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
        dets = [dets[i] for i in order]
        if not dets:
            out[c] = 0.0
            continue
        tp = _match_class(dets, gt_c, iou_min)
        out[c] = ranked_ap(np.arange(len(tp), 0, -1), tp, npos, mode)
    return out


def corloc(top_boxes: Mapping[str, Mapping[int, Box]], gt: Mapping[str, Sequence[Box]],
           num_classes: int, iou_min: float = 0.5) -> dict[int, float]:
    """Per class: fraction of its positive images whose predicted box hits a GT of that class."""
    hits = np.zeros(num_classes + 1)
    total = np.zeros(num_classes + 1)
    for image_id, per_class in top_boxes.items():
        g = gt.get(image_id, [])
        for c, box in per_class.items():
            total[c] += 1
            if box is not None and any(b.class_id == c and iou(box, b) >= iou_min for b in g):
                hits[c] += 1
    return {c: float(hits[c] / total[c]) for c in range(1, num_classes + 1) if total[c] > 0}


def classification_ap(scores: np.ndarray, labels: np.ndarray, mode: str = "all") -> dict[int, float]:
    """Per-class AP of ranking images by score; classes without positives are excluded."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("classification scores must be finite")
    return {c + 1: ranked_ap(scores[:, c], labels[:, c] > 0, mode=mode)
            for c in range(labels.shape[1]) if labels[:, c].any()}


def top1_errors(predictions: Mapping[str, tuple[int, Box | None]], gt: Mapping[str, Sequence[Box]],
                labels: Mapping[str, np.ndarray], iou_min: float = 0.5) -> tuple[float, float]:
    """(classification error, localization error) of one (class, box) guess per image."""
    if not predictions:
        return 0.0, 0.0
    cls_err = loc_err = 0
    for image_id, (c, box) in predictions.items():
        right = labels[image_id][c - 1] > 0
        cls_err += not right
        hit = right and box is not None and any(
            b.class_id == c and iou(box, b) >= iou_min for b in gt.get(image_id, []))
        loc_err += not hit
    n = len(predictions)
    return cls_err / n, loc_err / n


def random_box_baseline(top_boxes: Mapping[str, Mapping[int, Box]], image_sizes: Mapping[str, tuple[int, int]],
                        rng_seed: int = 0) -> dict[str, dict[int, Box]]:
    """Same number of boxes at uniformly random positions.

    A given box keeps its width and height; a ``None`` slot gets a uniformly random size.
    """
    rng = np.random.default_rng(rng_seed)
    out: dict[str, dict[int, Box]] = {}
    for image_id, per_class in top_boxes.items():
        w, h = image_sizes[image_id]
        out[image_id] = {}
        for c, b in per_class.items():
            if b is not None:
                bw, bh = min(b.width, w), min(b.height, h)
            else:
                bw, bh = int(rng.integers(1, w + 1)), int(rng.integers(1, h + 1))
            x0, y0 = int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1))
            out[image_id][c] = Box(x0, y0, x0 + bw, y0 + bh, class_id=c)
    return out


def _mean(d: Mapping[int, float]) -> float:
    return float(np.mean(list(d.values()))) if d else float("nan")


@dataclass
class EvalReport:
    class_names: list[str]
    ap: dict[int, float] = field(default_factory=dict)
    corloc: dict[int, float] = field(default_factory=dict)
    cls_ap: dict[int, float] = field(default_factory=dict)
    top1_cls_error: float | None = None
    top1_loc_error: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def map(self) -> float:
        return _mean(self.ap)

    @property
    def mean_corloc(self) -> float:
        return _mean(self.corloc)

    @property
    def mean_cls_ap(self) -> float:
        return _mean(self.cls_ap)

    def to_json(self) -> dict:
        def named(d):
            return {self.class_names[c - 1]: v for c, v in sorted(d.items())}
        return {"class_names": list(self.class_names), "ap": named(self.ap), "map": self.map, "corloc": named(self.corloc),
                "mean_corloc": self.mean_corloc, "cls_ap": named(self.cls_ap),
                "mean_cls_ap": self.mean_cls_ap, "top1_cls_error": self.top1_cls_error,
                "top1_loc_error": self.top1_loc_error, "config": self.config}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True, allow_nan=True)

    def table(self) -> str:
        """One row per metric, one column per class plus the mean."""
        return format_table([("", self)], per_class=True)


def _fmt(v: float | None) -> str:
    return "-" if v is None or v != v else f"{100 * v:.1f}"


def format_table(rows: Sequence[tuple[str, EvalReport]], per_class: bool = False) -> str:
    """Aligned text table; with ``per_class`` each report expands to AP / CorLoc / cls-AP lines."""
    if not rows:
        return ""
    names = rows[0][1].class_names
    header = ["method", "metric"] + list(names) + ["mean"]
    lines = []
    for label, rep in rows:
        for metric, d, mean in (("AP", rep.ap, rep.map), ("CorLoc", rep.corloc, rep.mean_corloc),
                                ("clsAP", rep.cls_ap, rep.mean_cls_ap)):
            if not d and not per_class:
                continue
            lines.append([label, metric] + [_fmt(d.get(c)) for c in range(1, len(names) + 1)] + [_fmt(mean)])
        if rep.top1_loc_error is not None:
            lines.append([label, "top1-loc-err"] + [""] * len(names) + [_fmt(rep.top1_loc_error)])
            lines.append([label, "top1-cls-err"] + [""] * len(names) + [_fmt(rep.top1_cls_error)])
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(s.ljust(w) if i < 2 else s.rjust(w) for i, (s, w) in enumerate(zip(r, widths)))
    out = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines]
    return "\n".join(out) + "\n"
