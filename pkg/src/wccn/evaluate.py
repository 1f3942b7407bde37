"""Run a trained model over a split and score it."""
from __future__ import annotations

import json
import logging
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .boxes import Box
from .cascade import Cascade, _stage_one, detect, localize, single_batch
from .data import Dataset, Sample
from .metrics import EvalReport, classification_ap, corloc, detection_ap, random_box_baseline, top1_errors
from .proposals import ProposalSet

log = logging.getLogger(__name__)


def _boxes(proposals: Mapping[str, ProposalSet | Sequence[Box]], image_id: str) -> list[Box]:
    p = proposals[image_id]
    return list(p.boxes if isinstance(p, ProposalSet) else p)


def class_scores(model: Cascade, samples: Sequence[Sample]) -> np.ndarray:
    """Image-level logits [N, C] from the location head."""
    out = []
    with ad.no_grad():
        for s in samples:
            _, logits, _ = _stage_one(model, single_batch([s]))
            out.append(logits.data[0])
    return np.array(out).reshape(len(samples), model.cfg.num_classes)


def run_detection(model, samples: Sequence[Sample], proposals, nms_iou: float = 0.3,
                  scales: Sequence[int] | None = None) -> dict[str, list[Box]]:
    return {s.image_id: detect(model, s, _boxes(proposals, s.image_id), nms_iou, scales=scales) for s in samples}


def run_localization(model: Cascade, samples: Sequence[Sample], proposals) -> dict[str, dict[int, Box]]:
    """Top box per present class for each image."""
    return {s.image_id: localize(model, s, _boxes(proposals, s.image_id)).boxes for s in samples}


def evaluate(model, dataset: Dataset, proposals, gt: Mapping[str, Sequence[Box]],
             splits_det: Sequence[str] = ("test",), splits_loc: Sequence[str] = ("train", "val"),
             ap_mode: str = "all", with_corloc: bool = True, with_classification: bool = True,
             config: dict | None = None) -> EvalReport:
    """Detection AP and classification AP on ``splits_det``, CorLoc on ``splits_loc``."""
    C = dataset.num_classes
    report = EvalReport(list(dataset.class_names), config=dict(config or {}))
    test = dataset.split(*splits_det)
    if test:
        dets = run_detection(model, test, proposals)
        report.ap = detection_ap(dets, {s.image_id: gt.get(s.image_id, []) for s in test}, C, mode=ap_mode)
        if with_classification and hasattr(model, "loc"):
            scores = class_scores(model, test)
            labels = np.stack([s.labels for s in test])
            report.cls_ap = classification_ap(scores, labels, ap_mode)
            preds = {}
            for s, row in zip(test, scores):
                c = int(np.argmax(row)) + 1
                preds[s.image_id] = (c, localize(model, s, _boxes(proposals, s.image_id), [c]).boxes.get(c))
            report.top1_cls_error, report.top1_loc_error = top1_errors(
                preds, gt, {s.image_id: s.labels for s in test})
    if with_corloc and hasattr(model, "loc"):
        tv = dataset.split(*splits_loc)
        report.corloc = corloc(run_localization(model, tv, proposals), gt, C)
    return report


def random_baseline_corloc(dataset: Dataset, gt: Mapping[str, Sequence[Box]],
                           splits: Sequence[str] = ("train", "val"), rng_seed: int = 0,
                           reference: Mapping[str, Mapping[int, Box]] | None = None) -> dict[int, float]:
    """CorLoc of one uniformly placed random box per (image, present class).

    With ``reference`` (a model's localizations) each random box copies the size of
    the corresponding predicted box; otherwise sizes are random too.
    """
    samples = dataset.split(*splits)
    slots = {s.image_id: {c: (reference or {}).get(s.image_id, {}).get(c) for c in s.present_classes}
             for s in samples}
    boxes = random_box_baseline(slots, {s.image_id: s.size for s in samples}, rng_seed)
    return corloc(boxes, gt, dataset.num_classes)


def save_detections(path, detections: Mapping[str, Sequence[Box]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for image_id, boxes in detections.items():
            f.write(json.dumps({"image_id": image_id, "detections": [b.to_json() for b in boxes]},
                               sort_keys=True) + "\n")


def load_detections(path) -> dict[str, list[Box]]:
    out: dict[str, list[Box]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["image_id"]] = [Box.from_json(b) for b in rec["detections"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed detection record ({exc})") from None
    return out
