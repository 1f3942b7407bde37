"""Loading of box annotations.

Only evaluation code and the explicit true-GT retraining mode import this
module; training on image-level labels never does.
"""
from __future__ import annotations

import json
from pathlib import Path

from .boxes import Box
from .data import GT_FILE


class MissingGroundTruth(RuntimeError):
    pass


def read_boxes_jsonl(path: str | Path, num_classes: int | None = None) -> dict[str, list[Box]]:
    path = Path(path)
    out: dict[str, list[Box]] = {}
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                boxes = [Box.from_json(b) for b in rec["boxes"]]
                image_id = rec["image_id"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed box record ({exc})") from None
            for b in boxes:
                if b.class_id is None or (num_classes is not None and not 1 <= b.class_id <= num_classes):
                    raise ValueError(f"{path}:{lineno}: box without a valid class id: {b}")
            out[image_id] = boxes
    return out


def load_hidden_gt(root: str | Path, num_classes: int | None = None) -> dict[str, list[Box]]:
    path = Path(root) / GT_FILE
    if not path.exists():
        raise MissingGroundTruth(f"{path} not found: dataset is weak-only, evaluation needs box annotations")
    return read_boxes_jsonl(path, num_classes)
