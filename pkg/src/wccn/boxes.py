"""Half-open integer pixel boxes, IoU and greedy non-maximum suppression."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

DEFAULT_NMS_IOU = 0.3


@dataclass(frozen=True)
class Box:
    """Rectangle covering pixels ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int
    class_id: int | None = None
    score: float | None = None

    def __post_init__(self) -> None:
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate in {self}")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"degenerate box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def coords(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x1, self.y1

    def with_(self, **kw) -> "Box":
        return replace(self, **kw)

    def to_json(self) -> dict:
        d = {"x0": int(self.x0), "y0": int(self.y0), "x1": int(self.x1), "y1": int(self.y1)}
        if self.class_id is not None:
            d["class"] = int(self.class_id)
        if self.score is not None:
            d["score"] = float(self.score)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Box":
        score = d.get("score")
        return cls(int(d["x0"]), int(d["y0"]), int(d["x1"]), int(d["y1"]),
                   class_id=d.get("class"), score=None if score is None else float(score))


def iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array([b.coords() for b in boxes], dtype=np.int64)


def iou_matrix(a: Sequence[Box] | np.ndarray, b: Sequence[Box] | np.ndarray) -> np.ndarray:
    """Pairwise IoU, same arithmetic as :func:`iou`, shape [len(a), len(b)]."""
    a = a if isinstance(a, np.ndarray) else boxes_to_array(a)
    b = b if isinstance(b, np.ndarray) else boxes_to_array(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def nms(boxes: Sequence[Box], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Box]:
    """Greedy NMS over one class; ties in score keep the earlier box first."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[Box] = []
    for i in order:
        if all(iou(boxes[i], k) <= iou_threshold for k in kept):
            kept.append(boxes[i])
    return kept


def nms_per_class(boxes: Iterable[Box], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Box]:
    by_class: dict[int | None, list[Box]] = {}
    for b in boxes:
        by_class.setdefault(b.class_id, []).append(b)
    out: list[Box] = []
    for cls in sorted(by_class, key=lambda c: -1 if c is None else c):
        out.extend(nms(by_class[cls], iou_threshold))
    return out


def _round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def rescale_box(b: Box, from_size: tuple[int, int], to_size: tuple[int, int]) -> Box:
    """Map ``b`` from an image of ``(w, h)`` = from_size onto one of to_size."""
    fw, fh = from_size
    tw, th = to_size
    if min(fw, fh, tw, th) <= 0:
        raise ValueError(f"sizes must be positive: {from_size} -> {to_size}")
    sx, sy = tw / fw, th / fh
    return Box(_round_half_away(b.x0 * sx), _round_half_away(b.y0 * sy),
               _round_half_away(b.x1 * sx), _round_half_away(b.y1 * sy),
               class_id=b.class_id, score=b.score)


def clip_box(b: Box, size: tuple[int, int]) -> Box:
    w, h = size
    return b.with_(x0=max(0, b.x0), y0=max(0, b.y0), x1=min(w, b.x1), y1=min(h, b.y1))
