"""Sliding-window object proposals scored by edge evidence.

A window scores high when it encloses a lot of Sobel edge mass relative to
its perimeter, and loses score for edge mass in a thin band just outside
its boundary (edges the window cuts through). Greedy suppression among
windows keeps the capped list spread over the image.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .boxes import Box, iou_matrix

GENERATOR_TAG = "sliding-edge-v1"


@dataclass(frozen=True)
class ProposalConfig:
    scales: tuple[float, ...] = (0.2, 0.35, 0.5, 0.7)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    stride_frac: float = 1 / 8
    cap: int = 300
    band_frac: float = 0.1
    nms_iou: float = 0.6


@dataclass
class ProposalSet:
    image_id: str
    boxes: list[Box]
    generator_tag: str = GENERATOR_TAG

    def __len__(self) -> int:
        return len(self.boxes)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "generator": self.generator_tag,
                "boxes": [b.to_json() for b in self.boxes]}

    @classmethod
    def from_json(cls, d: dict) -> "ProposalSet":
        return cls(d["image_id"], [Box.from_json(b) for b in d["boxes"]],
                   d.get("generator", GENERATOR_TAG))


def edge_map(pixels: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of the grayscale image, scaled to max 1 (zeros if flat)."""
    gray = pixels.astype(np.float64) @ np.array([0.299, 0.587, 0.114]) if pixels.ndim == 3 \
        else pixels.astype(np.float64)
    mag = np.hypot(ndimage.sobel(gray, axis=0), ndimage.sobel(gray, axis=1))
    mx = mag.max()
    return mag / mx if mx > 0 else mag


def sliding_windows(width: int, height: int, cfg: ProposalConfig) -> np.ndarray:
    """All windows [K, 4] (x0, y0, x1, y1) over the scale x aspect grid, in generation order."""
    side = min(width, height)
    out = []
    for s in cfg.scales:
        for a in cfg.aspect_ratios:
            w = int(round(s * side * np.sqrt(a)))
            h = int(round(s * side / np.sqrt(a)))
            w, h = min(max(w, 1), width), min(max(h, 1), height)
            sx = max(1, int(round(w * cfg.stride_frac)))
            sy = max(1, int(round(h * cfg.stride_frac)))
            xs = list(range(0, width - w + 1, sx))
            ys = list(range(0, height - h + 1, sy))
            if xs[-1] != width - w:
                xs.append(width - w)
            if ys[-1] != height - h:
                ys.append(height - h)
            gx, gy = np.meshgrid(xs, ys)
            gx, gy = gx.reshape(-1), gy.reshape(-1)
            out.append(np.stack([gx, gy, gx + w, gy + h], axis=1))
    return np.concatenate(out).astype(np.int64)


def _box_sums(integral: np.ndarray, win: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = win.T
    return integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]


def score_windows(edges: np.ndarray, windows: np.ndarray, band_frac: float = 0.1) -> np.ndarray:
    """Objectness in [0, 1]: enclosed minus straddling edge mass per unit perimeter, max-normalized."""
    h, w = edges.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = edges.cumsum(0).cumsum(1)
    inside = _box_sums(integral, windows)
    ww = windows[:, 2] - windows[:, 0]
    wh = windows[:, 3] - windows[:, 1]
    band = np.maximum(1, np.round(band_frac * np.minimum(ww, wh))).astype(np.int64)
    outer = np.stack([np.maximum(windows[:, 0] - band, 0), np.maximum(windows[:, 1] - band, 0),
                      np.minimum(windows[:, 2] + band, w), np.minimum(windows[:, 3] + band, h)], axis=1)
    straddle = _box_sums(integral, outer) - inside
    raw = (inside - straddle) / (2.0 * (ww + wh))
    top = raw.max() if raw.size else 0.0
    if not top > 0:
        return np.zeros(len(windows))
    return np.clip(raw / top, 0.0, 1.0)


def _diverse_top(windows: np.ndarray, scores: np.ndarray, iou_max: float, cap: int) -> list[int]:
    """Greedy suppression in score order (ties: window order); refills from the suppressed if short."""
    order = np.lexsort((np.arange(len(windows)), -scores))
    if not scores.any():
        return [int(i) for i in order[:cap]]
    keep: list[int] = []
    for i in order:
        if len(keep) >= cap:
            break
        if not keep or iou_matrix(windows[i:i + 1], windows[keep]).max() <= iou_max:
            keep.append(int(i))
    if len(keep) < cap:
        taken = set(keep)
        keep.extend([int(i) for i in order if int(i) not in taken][:cap - len(keep)])
    return keep


def generate_proposals(sample, cfg: ProposalConfig = ProposalConfig()) -> ProposalSet:
    """Top ``cfg.cap`` diverse windows by objectness."""
    pixels = sample.pixels
    h, w = pixels.shape[:2]
    windows = sliding_windows(w, h, cfg)
    scores = score_windows(edge_map(pixels), windows, cfg.band_frac)
    picked = _diverse_top(windows, scores, cfg.nms_iou, cfg.cap)
    boxes = [Box(*map(int, windows[i]), score=float(scores[i])) for i in picked]
    return ProposalSet(sample.image_id, boxes)


def recall_at_iou(proposals: ProposalSet | Sequence[Box], gt: Sequence[Box], iou_min: float = 0.5) -> float:
    """Fraction of ``gt`` boxes covered by at least one proposal with IoU >= iou_min."""
    if not gt:
        raise ValueError("recall_at_iou needs at least one GT box")
    boxes = proposals.boxes if isinstance(proposals, ProposalSet) else list(proposals)
    if not boxes:
        return 0.0
    best = iou_matrix(gt, boxes).max(axis=1)
    return float(np.mean(best >= iou_min))


def save_proposals(path: str | Path, sets: Sequence[ProposalSet]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for s in sets:
            f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def load_proposals(path: str | Path) -> dict[str, ProposalSet]:
    path = Path(path)
    out = {}
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                ps = ProposalSet.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed proposal record ({exc})") from None
            out[ps.image_id] = ps
    return out
