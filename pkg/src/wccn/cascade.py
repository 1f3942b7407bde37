"""Two- and three-stage cascades: location net -> (weak segmentation) -> MIL over candidates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import DEFAULT_NMS_IOU, Box, nms, rescale_box
from .cam import (DEFAULT_CAM_THRESHOLD, build_pseudo_seg_gt, cam_to_boxes, extract_cam,
                  select_candidate_indices)
from .data import Batch, Sample, image_tensor, scaled_size
from .layers import (ArchConfig, LocationHead, MILHead, ParamRegistry, SegHead, Trunk,
                     init_params)
from .losses import LossWeights, gap_loss, mil_loss, pixel_softmax, total_loss, weak_seg_loss, one_hot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CascadeConfig:
    stages: str = "two"
    pooling: str = "gap"
    num_classes: int = 4
    candidate_k: int = 10
    cam_threshold: float = DEFAULT_CAM_THRESHOLD
    max_cam_boxes: int = 3
    loss_weights: LossWeights = LossWeights(lambda_seg=0.05)
    seg_candidates: bool = True
    trunk_channels: tuple[int, int, int] = (16, 32, 32)
    head_hidden: int = 64
    roi_size: int = 4
    fc_dim: int = 512

    def __post_init__(self) -> None:
        if self.stages not in ("two", "three"):
            raise ValueError(f"stages must be 'two' or 'three', got {self.stages!r}")
        if self.candidate_k < 1:
            raise ValueError("candidate_k must be >= 1")
        if not 0 < self.cam_threshold < 1:
            raise ValueError("cam_threshold must be in (0, 1)")

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(num_classes=self.num_classes, trunk_channels=tuple(self.trunk_channels),
                          head_hidden=self.head_hidden, roi_size=self.roi_size, fc_dim=self.fc_dim,
                          pooling=self.pooling)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "loss_weights"}
        d["trunk_channels"] = list(self.trunk_channels)
        w = self.loss_weights
        d["loss_weights"] = {"gap": w.lambda_gap, "seg": w.lambda_seg, "mil": w.lambda_mil}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CascadeConfig":
        d = dict(d)
        lw = d.pop("loss_weights", None)
        if lw is not None:
            d["loss_weights"] = LossWeights(lambda_gap=lw.get("gap", 1.0), lambda_seg=lw.get("seg", 0.05),
                                            lambda_mil=lw.get("mil", 1.0))
        if "trunk_channels" in d:
            d["trunk_channels"] = tuple(d["trunk_channels"])
        return cls(**d)


@dataclass
class ImageRecord:
    image_id: str
    logits: np.ndarray
    cam_boxes: dict[int, list[Box]] = field(default_factory=dict)
    seg_boxes: dict[int, list[Box]] = field(default_factory=dict)
    candidates: dict[int, list[int]] = field(default_factory=dict)
    best_box: dict[int, Box] = field(default_factory=dict)
    seg_softmax: np.ndarray | None = None


@dataclass
class ForwardRecord:
    images: list[ImageRecord]
    losses: dict[str, float]
    total: Tensor
    parts: dict[str, Tensor]


class Cascade:
    """Shared trunk with location, optional segmentation, and MIL heads."""

    def __init__(self, cfg: CascadeConfig, seed: int = 0) -> None:
        self.cfg = cfg
        arch = cfg.arch
        self.params = ParamRegistry()
        self.trunk = Trunk(self.params, arch)
        self.loc = LocationHead(self.params, arch, self.trunk.out_channels)
        self.seg = SegHead(self.params, arch, self.trunk.out_channels) if cfg.stages == "three" else None
        self.mil = MILHead(self.params, arch, self.trunk.out_channels)
        for layer in self.layers:
            init_params(layer, seed)

    @property
    def layers(self):
        heads = [self.trunk, self.loc] + ([self.seg] if self.seg is not None else []) + [self.mil]
        return [l for h in heads for l in h.layers]

    # -------------------------------------------------------------- forward

    def forward(self, batch: Batch, proposals: Sequence[Sequence[Box]]) -> ForwardRecord:
        if self.cfg.stages == "three":
            return forward_three_stage(self, batch, proposals)
        return forward_two_stage(self, batch, proposals)


def _feature_roi(b: Box, img_size: tuple[int, int], feat_size: tuple[int, int]) -> tuple[int, int, int, int]:
    (iw, ih), (fw, fh) = img_size, feat_size
    x0 = min(int(math.floor(b.x0 * fw / iw)), fw - 1)
    y0 = min(int(math.floor(b.y0 * fh / ih)), fh - 1)
    x1 = max(int(math.ceil(b.x1 * fw / iw)), x0 + 1)
    y1 = max(int(math.ceil(b.y1 * fh / ih)), y0 + 1)
    return x0, y0, min(x1, fw), min(y1, fh)


def _scaled_proposals(props: Sequence[Box], native: tuple[int, int], size: tuple[int, int]) -> list[Box]:
    if native == size:
        return list(props)
    return [rescale_box(p, native, size) for p in props]


def _mask_boxes(mask: np.ndarray, values: np.ndarray, class_id: int) -> list[Box]:
    labels, n = ndimage.label(mask)
    found = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        peak = float(values[sl][labels[sl] == k].max())
        ys, xs = sl
        found.append((-peak, k, Box(xs.start, ys.start, xs.stop, ys.stop, class_id=class_id, score=peak)))
    found.sort(key=lambda t: (t[0], t[1]))
    return [b for _, _, b in found]


def _stage_one(model: Cascade, batch: Batch):
    feats = model.trunk(batch.images)
    logits, maps = model.loc(feats)
    return feats, logits, maps


def _cam_boxes(model: Cascade, maps: np.ndarray, classes: Sequence[int], size: tuple[int, int]) -> dict[int, list[Box]]:
    cam = extract_cam(maps, classes, size)
    k = model.cfg.max_cam_boxes
    return {c: cam_to_boxes(cam, c, model.cfg.cam_threshold)[:k] for c in classes}


def _mil_branch(model: Cascade, batch: Batch, feats: Tensor, records: list[ImageRecord],
                boxes_for: list[dict[int, list[Box]]], proposals: Sequence[Sequence[Box]]) -> Tensor | None:
    """Select candidates, pool them from the shared features and return the batch MIL loss."""
    fsize = (feats.shape[3], feats.shape[2])
    rois, owners, bags = [], [], []
    for n, rec in enumerate(records):
        props = _scaled_proposals(proposals[n], batch.native_sizes[n], batch.size)
        slot: dict[int, int] = {}
        for c, cboxes in boxes_for[n].items():
            idx = select_candidate_indices(cboxes, props, model.cfg.candidate_k)
            rec.candidates[c] = idx
            if not idx:
                continue
            rows = []
            for j in idx:
                if j not in slot:
                    slot[j] = len(rois)
                    rois.append(_feature_roi(props[j], batch.size, fsize))
                    owners.append(n)
                rows.append(slot[j])
            bags.append((n, c, idx, rows))
        if not any(rec.candidates.values()):
            log.warning("image %s has no MIL candidates; only the image-level loss applies", rec.image_id)
    if not bags:
        return None
    scores = model.mil(feats, rois, owners)
    C = model.cfg.num_classes
    per_image: dict[int, list[Tensor]] = {}
    for n, c, idx, rows in bags:
        flat = (np.asarray(rows)[:, None] * C + np.arange(C)[None, :]).reshape(-1)
        f = ad.transpose(ad.reshape(ad.take(scores, flat), (len(rows), C)))
        per_image.setdefault(n, []).append(mil_loss(f, one_hot(c - 1, C)))
        best = idx[int(np.argmax(f.data[c - 1]))]
        records[n].best_box[c] = proposals[n][best].with_(class_id=c)
    terms = [t for ts in per_image.values() for t in ts]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.scale(out, 1.0 / len(records))


def _records(batch: Batch, logits: Tensor) -> list[ImageRecord]:
    return [ImageRecord(image_id=i, logits=logits.data[n].copy()) for n, i in enumerate(batch.image_ids)]


def _present(labels: np.ndarray) -> list[int]:
    return [int(c) + 1 for c in np.flatnonzero(labels > 0)]


def _finish(model: Cascade, records, parts: dict[str, Tensor | None]) -> ForwardRecord:
    present = {k: v for k, v in parts.items() if v is not None}
    total = total_loss(present, model.cfg.loss_weights)
    losses = {k: float(v.item()) for k, v in present.items()}
    losses["total"] = float(total.item())
    return ForwardRecord(records, losses, total, present)


def forward_two_stage(model: Cascade, batch: Batch, proposals: Sequence[Sequence[Box]]) -> ForwardRecord:
    feats, logits, maps = _stage_one(model, batch)
    records = _records(batch, logits)
    boxes_for = []
    for n, rec in enumerate(records):
        rec.cam_boxes = _cam_boxes(model, maps.data[n], _present(batch.labels[n]), batch.size)
        boxes_for.append(rec.cam_boxes)
    parts = {"gap": gap_loss(logits, batch.labels),
             "mil": _mil_branch(model, batch, feats, records, boxes_for, proposals)}
    return _finish(model, records, parts)


def forward_three_stage(model: Cascade, batch: Batch, proposals: Sequence[Sequence[Box]]) -> ForwardRecord:
    if model.seg is None:
        raise ValueError("model was built without a segmentation head")
    feats, logits, maps = _stage_one(model, batch)
    records = _records(batch, logits)
    seg_scores = model.seg(feats)
    fh, fw = seg_scores.shape[2:]
    seg_terms, boxes_for = [], []
    for n, rec in enumerate(records):
        classes = _present(batch.labels[n])
        rec.cam_boxes = _cam_boxes(model, maps.data[n], classes, batch.size)
        S = pixel_softmax(ad.select(seg_scores, n))
        rec.seg_softmax = S.data
        pseudo = build_pseudo_seg_gt(extract_cam(maps.data[n], classes), batch.labels[n],
                                     model.cfg.cam_threshold)
        seg_terms.append(weak_seg_loss(S, batch.labels[n], pseudo))
        chosen = {}
        if model.cfg.seg_candidates:
            winner = np.argmax(S.data, axis=0)
            for c in classes:
                found = _mask_boxes(winner == c - 1, S.data[c - 1], c)[:model.cfg.max_cam_boxes]
                found = [rescale_box(b, (fw, fh), batch.size) for b in found]
                rec.seg_boxes[c] = found
                if found:
                    chosen[c] = found
                else:
                    log.debug("image %s class %d: empty seg foreground, using CAM boxes", rec.image_id, c)
                    chosen[c] = rec.cam_boxes[c]
        else:
            chosen = rec.cam_boxes
        boxes_for.append(chosen)
    seg = seg_terms[0]
    for t in seg_terms[1:]:
        seg = ad.add(seg, t)
    parts = {"gap": gap_loss(logits, batch.labels),
             "mil": _mil_branch(model, batch, feats, records, boxes_for, proposals),
             "seg": ad.scale(seg, 1.0 / len(records))}
    return _finish(model, records, parts)


# -------------------------------------------------------------- inference

def single_batch(samples: Sequence[Sample], scale: int | None = None) -> Batch:
    w, h = samples[0].size
    size = (w, h) if scale is None else scaled_size(w, h, scale)
    arr = np.stack([image_tensor(s.pixels, None if size == s.size else size) for s in samples])
    return Batch(Tensor(arr), [s.image_id for s in samples], np.stack([s.labels for s in samples]),
                 [s.size for s in samples], size)


def box_class_scores(model: Cascade, sample: Sample, proposals: Sequence[Box],
                     scales: Sequence[int] | None = None) -> np.ndarray:
    """Per-proposal class probabilities [n, C], averaged over inference scales."""
    scales = list(scales) if scales else [None]
    acc = np.zeros((len(proposals), model.cfg.num_classes))
    with ad.no_grad():
        for s in scales:
            batch = single_batch([sample], s)
            feats = model.trunk(batch.images)
            fsize = (feats.shape[3], feats.shape[2])
            props = _scaled_proposals(proposals, sample.size, batch.size)
            rois = [_feature_roi(p, batch.size, fsize) for p in props]
            logits = model.mil(feats, rois).data
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z)
            # detectors with a background output keep only the object columns
            acc += (p / p.sum(axis=1, keepdims=True))[:, :model.cfg.num_classes]
    return acc / len(scales)


def detect(model: Cascade, sample: Sample, proposals: Sequence[Box], nms_iou: float = DEFAULT_NMS_IOU,
           score_min: float = 0.0, scales: Sequence[int] | None = None) -> list[Box]:
    """Score every proposal for every class with the MIL head, threshold, then per-class NMS."""
    if not proposals:
        return []
    probs = box_class_scores(model, sample, proposals, scales)
    out: list[Box] = []
    for c in range(model.cfg.num_classes):
        keep = [p.with_(class_id=c + 1, score=float(probs[j, c]))
                for j, p in enumerate(proposals) if probs[j, c] >= score_min]
        out.extend(nms(keep, nms_iou))
    return out


@dataclass
class Localization:
    image_id: str
    logits: np.ndarray
    boxes: dict[int, Box]
    candidates: dict[int, list[int]]
    cam_boxes: dict[int, list[Box]]


def localize(model: Cascade, sample: Sample, proposals: Sequence[Box],
             classes: Sequence[int] | None = None, fallback: bool = True) -> Localization:
    """Best MIL box per class among that class's candidates.

    A class without candidates is searched over all proposals when
    ``fallback`` is set and left out of ``boxes`` otherwise.

    ``classes`` defaults to the image's labels; candidates come from the CAM
    (or, for the three-stage model, the segmentation foreground).
    """
    classes = list(classes) if classes is not None else sample.present_classes
    with ad.no_grad():
        batch = single_batch([sample])
        feats, logits, maps = _stage_one(model, batch)
        cam_boxes = _cam_boxes(model, maps.data[0], classes, batch.size)
        chosen = dict(cam_boxes)
        if model.seg is not None and model.cfg.seg_candidates:
            S = pixel_softmax(ad.select(model.seg(feats), 0)).data
            fh, fw = S.shape[1:]
            winner = np.argmax(S, axis=0)
            for c in classes:
                found = _mask_boxes(winner == c - 1, S[c - 1], c)[:model.cfg.max_cam_boxes]
                if found:
                    chosen[c] = [rescale_box(b, (fw, fh), batch.size) for b in found]
        cands = {c: select_candidate_indices(chosen[c], proposals, model.cfg.candidate_k) for c in classes}
        fsize = (feats.shape[3], feats.shape[2])
        scores = model.mil(feats, [_feature_roi(p, batch.size, fsize) for p in proposals]).data
    best = {}
    for c in classes:
        pool = cands[c] or (list(range(len(proposals))) if fallback else [])
        if not pool:
            continue
        j = pool[int(np.argmax(scores[pool, c - 1]))]
        best[c] = proposals[j].with_(class_id=c, score=float(scores[j, c - 1]))
    return Localization(sample.image_id, logits.data[0].copy(), best, cands, cam_boxes)
