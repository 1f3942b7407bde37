"""Class activation maps, CAM-to-box thresholding, candidate selection, pseudo seg labels."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .boxes import Box, iou_matrix
from .raster import to_bytes_minmax, write_pgm

log = logging.getLogger(__name__)

DEFAULT_CAM_THRESHOLD = 0.2
BACKGROUND_STRIDE = 16


@dataclass
class CAM:
    """Per-class activation maps at image resolution.

    ``maps[k]`` belongs to ``class_ids[k]`` (1-based); ``head_maps`` keeps the
    same channels at the resolution of the location head.
    """

    maps: np.ndarray
    class_ids: tuple[int, ...]
    image_size: tuple[int, int]
    head_maps: np.ndarray | None = None

    def channel(self, class_id: int) -> np.ndarray:
        try:
            return self.maps[self.class_ids.index(class_id)]
        except ValueError:
            raise KeyError(f"class {class_id} not in CAM classes {self.class_ids}") from None


@dataclass
class PseudoSegGT:
    G: np.ndarray
    alpha: np.ndarray
    I_s: np.ndarray
    peaks: dict[int, int] = field(default_factory=dict)


def _nearest_resize(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = m.shape[-2:]
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return m[..., rows[:, None], cols[None, :]]


def extract_cam(activations: Tensor | np.ndarray, target_classes: Iterable[int],
                image_size: tuple[int, int] | None = None) -> CAM:
    """Pick the pre-pooling maps of ``target_classes`` (1-based) and upsample them (nearest).

    ``activations`` is the location head's [C, h, w] (or [1, C, h, w]) map;
    ``image_size`` is (w, h) and defaults to the head resolution.
    """
    a = activations.data if isinstance(activations, Tensor) else np.asarray(activations, dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    ids = tuple(int(c) for c in target_classes)
    head = a[[c - 1 for c in ids]] if ids else np.zeros((0,) + a.shape[1:])
    w, h = image_size if image_size is not None else (a.shape[2], a.shape[1])
    return CAM(maps=_nearest_resize(head, h, w), class_ids=ids, image_size=(w, h), head_maps=head)


def _components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    # default structuring element in 2-D is the 4-connected cross
    return ndimage.label(mask)


def cam_to_boxes(cam: CAM, class_id: int, threshold_frac: float = DEFAULT_CAM_THRESHOLD) -> list[Box]:
    """Bounding boxes of the 4-connected regions at or above ``threshold_frac * max``.

    Sorted by the peak value inside each region, highest first.
    """
    if not 0 < threshold_frac < 1:
        raise ValueError(f"threshold_frac must be in (0, 1), got {threshold_frac}")
    m = cam.channel(class_id)
    mx = float(m.max())
    if not mx > 0:
        return []
    labels, n = _components(m >= threshold_frac * mx)
    found = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        peak = float(m[sl][labels[sl] == k].max())
        ys, xs = sl
        found.append((-peak, k, Box(xs.start, ys.start, xs.stop, ys.stop, class_id=class_id, score=peak)))
    found.sort(key=lambda t: (t[0], t[1]))
    return [b for _, _, b in found]


def select_candidate_indices(cam_boxes: Sequence[Box], proposals: Sequence[Box], k: int) -> list[int]:
    """Indices into ``proposals`` of the union of per-CAM-box top-``k`` IoU matches.

    Ties in IoU go to the lower proposal index; the order is first appearance.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not cam_boxes or not proposals:
        return []
    ious = iou_matrix(cam_boxes, proposals)
    seen: set[int] = set()
    out: list[int] = []
    for row in ious:
        for j in np.lexsort((np.arange(len(row)), -row))[:k]:
            if int(j) not in seen:
                seen.add(int(j))
                out.append(int(j))
    return out


def select_candidates(cam_boxes: Sequence[Box], proposals: Sequence[Box], k: int) -> list[Box]:
    return [proposals[j] for j in select_candidate_indices(cam_boxes, proposals, k)]


def build_pseudo_seg_gt(cam: CAM, labels, threshold_frac: float = DEFAULT_CAM_THRESHOLD) -> PseudoSegGT:
    """Pseudo per-pixel labels from the CAM of each present class.

    Foreground of class c = pixels at or above ``threshold_frac`` of the
    channel max (higher class ids overwrite lower ones); the rest is
    background (id C+1). Labeled pixels are the foreground plus every 16th
    background pixel in raster order.
    """
    y = np.asarray(labels)
    num_classes = y.shape[0]
    present = [int(c) + 1 for c in np.flatnonzero(y > 0)]
    if not present:
        raise ValueError("build_pseudo_seg_gt: no present class")
    h, w = cam.maps.shape[-2:]
    bg = num_classes + 1
    G = np.full((h, w), bg, dtype=np.int64)
    alpha = np.zeros((h, w))
    fg_any = np.zeros((h, w), dtype=bool)
    peaks: dict[int, int] = {}
    for c in present:
        m = cam.channel(c)
        peak = int(np.argmax(m))
        peaks[c] = peak
        mx, mn = float(m.max()), float(m.min())
        if mx > 0:
            fg = m >= threshold_frac * mx
        else:
            fg = np.zeros((h, w), dtype=bool)
            fg.flat[peak] = True
        norm = (m - mn) / (mx - mn) if mx > mn else np.ones_like(m)
        G[fg] = c
        alpha[fg] = norm[fg]
        fg_any |= fg
    bg_pixels = np.flatnonzero(~fg_any.reshape(-1))[::BACKGROUND_STRIDE]
    alpha.flat[bg_pixels] = 1.0
    I_s = np.union1d(np.flatnonzero(fg_any.reshape(-1)), bg_pixels)
    return PseudoSegGT(G=G, alpha=np.clip(alpha, 0.0, 1.0), I_s=I_s, peaks=peaks)


def dump_cam(cam: CAM, out_dir: str | Path, stem: str) -> list[Path]:
    """Write one P5 heatmap per class plus a JSON sidecar with the byte scale factors."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, scales = [], {}
    for k, c in enumerate(cam.class_ids):
        img, lo, hi = to_bytes_minmax(cam.maps[k])
        p = out_dir / f"{stem}_class{c}.pgm"
        write_pgm(p, img)
        written.append(p)
        scales[str(c)] = {"min": lo, "max": hi, "file": p.name}
    side = out_dir / f"{stem}_cam.json"
    side.write_text(json.dumps({"image_size": list(cam.image_size), "classes": scales},
                               indent=2, sort_keys=True))
    written.append(side)
    return written
