"""Synthetic shape dataset, its on-disk layout, and multi-scale batching.

Layout under a dataset root::

    images/<image_id>.ppm   binary P6 rasters
    labels.jsonl            {"image_id", "split", "labels": [class ids]}
    gt_boxes.jsonl          hidden boxes; written here, read only by wccn.hidden_gt
    manifest.json           classes, image size, seed, split counts

Class ids are 1-based everywhere outside of label vectors.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .boxes import Box, iou
from .raster import read_ppm, write_ppm

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
GT_FILE = "gt_boxes.jsonl"


@dataclass(frozen=True)
class ClassSpec:
    name: str
    shape: str
    color: tuple[int, int, int]


DEFAULT_CLASSES = (
    ClassSpec("square", "square", (240, 80, 80)),
    ClassSpec("disk", "disk", (80, 220, 90)),
    ClassSpec("triangle", "triangle", (90, 120, 255)),
    ClassSpec("cross", "cross", (240, 210, 50)),
)


@dataclass
class DatasetConfig:
    num_train: int = 500
    num_val: int = 100
    num_test: int = 200
    image_size: int = 64
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    objects_per_image: tuple[int, int] = (1, 3)
    object_size: tuple[int, int] = (20, 32)
    clutter_level: float = 0.5
    max_pair_iou: float = 0.2
    color_by_class: bool = True
    rng_seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_images(self) -> int:
        return self.num_train + self.num_val + self.num_test


@dataclass
class Sample:
    image_id: str
    pixels: np.ndarray
    labels: np.ndarray
    split: str

    def __eq__(self, other) -> bool:
        return (isinstance(other, Sample) and self.image_id == other.image_id
                and self.split == other.split and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.labels, other.labels))

    @property
    def present_classes(self) -> list[int]:
        return [int(c) + 1 for c in np.flatnonzero(self.labels)]

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[0]


HiddenGT = dict  # image_id -> list[Box] with class_id set


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]
    image_size: int
    seed: int | None = None
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, *names: str) -> list[Sample]:
        return [s for s in self.samples if s.split in names]

    def by_id(self) -> dict[str, Sample]:
        return {s.image_id: s for s in self.samples}

    @property
    def has_gt_file(self) -> bool:
        return self.root is not None and (self.root / GT_FILE).exists()


class DatasetError(RuntimeError):
    pass


# ----------------------------------------------------------------- rendering

def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        return (xx - c) ** 2 + (yy - c) ** 2 <= c ** 2
    if shape == "triangle":
        # apex at top centre, base along the bottom row
        return np.abs(xx - c) <= (yy / size) * c
    if shape == "cross":
        t = max(2, size // 3)
        lo = (size - t) // 2
        m = np.zeros((size, size), dtype=bool)
        m[lo:lo + t, :] = True
        m[:, lo:lo + t] = True
        return m
    raise ValueError(f"unknown shape {shape!r}")


def _background(rng: np.random.Generator, size: int, clutter: float) -> np.ndarray:
    base = rng.uniform(25, 60)
    low = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), sigma=size / 8)
    low = low / (np.abs(low).max() + 1e-12) * 15
    img = base + low[..., None] + rng.normal(0, 6, (size, size, 3))
    img = img + rng.uniform(-15, 15, size=3)
    for _ in range(int(round(clutter * 6))):
        color = rng.uniform(40, 230, size=3)
        x0, y0 = rng.uniform(0, size, 2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(size / 6, size / 2)
        ts = np.linspace(0, 1, int(length) * 2)
        xs = np.clip((x0 + np.cos(ang) * length * ts).astype(int), 0, size - 1)
        ys = np.clip((y0 + np.sin(ang) * length * ts).astype(int), 0, size - 1)
        img[ys, xs] = color
    return img


def render_image(rng: np.random.Generator, cfg: DatasetConfig) -> tuple[np.ndarray, np.ndarray, list[Box]]:
    size = cfg.image_size
    img = _background(rng, size, cfg.clutter_level)
    lo, hi = cfg.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    boxes: list[Box] = []
    masks = []
    for _ in range(n_obj):
        cls = int(rng.integers(cfg.num_classes))
        shape_def = cfg.classes[cls]
        for _attempt in range(100):
            s = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
            x = int(rng.integers(0, size - s + 1))
            y = int(rng.integers(0, size - s + 1))
            m = _shape_mask(shape_def.shape, s)
            ys, xs = np.nonzero(m)
            box = Box(x + int(xs.min()), y + int(ys.min()), x + int(xs.max()) + 1, y + int(ys.max()) + 1,
                      class_id=cls + 1)
            if all(iou(box, b) <= cfg.max_pair_iou for b in boxes):
                break
        else:
            raise DatasetError(f"could not place object {len(boxes) + 1} after 100 retries")
        boxes.append(box)
        masks.append((x, y, m, shape_def))
    for x, y, m, shape_def in masks:
        # without class colors the palette is shared, so only shape tells classes apart
        base = shape_def.color if cfg.color_by_class else cfg.classes[int(rng.integers(cfg.num_classes))].color
        color = np.clip(np.asarray(base) + rng.uniform(-25, 25, size=3), 0, 255)
        region = img[y:y + m.shape[0], x:x + m.shape[1]]
        region[m] = color
    labels = np.zeros(cfg.num_classes)
    for b in boxes:
        labels[b.class_id - 1] = 1.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), labels, boxes


def generate_dataset(cfg: DatasetConfig) -> tuple[list[Sample], HiddenGT]:
    """Render every image from its own generator seeded by (rng_seed, image index)."""
    if cfg.num_classes < 2:
        raise ValueError("need at least 2 classes")
    if cfg.image_size < 32:
        raise ValueError("image_size must be >= 32")
    samples: list[Sample] = []
    gt: HiddenGT = {}
    counts = (cfg.num_train, cfg.num_val, cfg.num_test)
    idx = 0
    for split, n in zip(SPLITS, counts):
        for _ in range(n):
            rng = np.random.default_rng([cfg.rng_seed, idx])
            pixels, labels, boxes = render_image(rng, cfg)
            image_id = f"{idx:06d}"
            samples.append(Sample(image_id, pixels, labels, split))
            gt[image_id] = boxes
            idx += 1
    return samples, gt


def make_dataset(cfg: DatasetConfig) -> tuple[Dataset, HiddenGT]:
    samples, gt = generate_dataset(cfg)
    ds = Dataset(samples, [c.name for c in cfg.classes], cfg.image_size, seed=cfg.rng_seed,
                 extra={"config": _config_json(cfg)})
    return ds, gt


def _config_json(cfg: DatasetConfig) -> dict:
    d = asdict(cfg)
    d["classes"] = [asdict(c) for c in cfg.classes]
    return d


# ----------------------------------------------------------------- I/O

def _jsonl_dump(path: Path, records) -> None:
    with path.open("w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def save_dataset(root: str | Path, dataset: Dataset, gt: HiddenGT | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        write_ppm(root / "images" / f"{s.image_id}.ppm", s.pixels)
    _jsonl_dump(root / "labels.jsonl", (
        {"image_id": s.image_id, "split": s.split, "labels": s.present_classes}
        for s in dataset.samples))
    if gt is not None:
        write_boxes_jsonl(root / GT_FILE, gt, order=[s.image_id for s in dataset.samples])
    counts = {sp: sum(s.split == sp for s in dataset.samples) for sp in SPLITS}
    manifest = {"num_classes": dataset.num_classes, "class_names": dataset.class_names,
                "image_size": dataset.image_size, "seed": dataset.seed, "counts": counts,
                **dataset.extra}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    dataset.root = root


def write_boxes_jsonl(path: str | Path, boxes: dict[str, list[Box]], order: Sequence[str] | None = None) -> None:
    """HiddenGT-shaped file: one {"image_id", "boxes"} record per image."""
    ids = list(order) if order is not None else sorted(boxes)
    _jsonl_dump(Path(path), ({"image_id": i, "boxes": [b.to_json() for b in boxes.get(i, [])]}
                             for i in ids if i in boxes))


def load_dataset(root: str | Path) -> Dataset:
    """Load images and image-level labels; box annotations are never touched here."""
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
        num_classes = int(manifest["num_classes"])
        class_names = list(manifest["class_names"])
        image_size = int(manifest["image_size"])
    except FileNotFoundError:
        raise DatasetError(f"missing file: {mpath}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt file: {mpath}: {exc}") from None
    lpath = root / "labels.jsonl"
    if not lpath.exists():
        raise DatasetError(f"missing file: {lpath}")
    samples = []
    with lpath.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id, split, classes = rec["image_id"], rec["split"], rec["labels"]
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{lpath}:{lineno}: malformed record ({exc})") from None
            bad = [c for c in classes if not isinstance(c, int) or not 1 <= c <= num_classes]
            if bad:
                raise DatasetError(f"{lpath}:{lineno}: unknown class id(s) {bad}")
            if split not in SPLITS or not classes:
                raise DatasetError(f"{lpath}:{lineno}: bad split {split!r} or empty labels")
            ipath = root / "images" / f"{image_id}.ppm"
            try:
                pixels = read_ppm(ipath)
            except FileNotFoundError:
                raise DatasetError(f"missing file: {ipath}") from None
            except ValueError as exc:
                raise DatasetError(f"corrupt file: {ipath}: {exc}") from None
            labels = np.zeros(num_classes)
            labels[np.asarray(classes) - 1] = 1.0
            samples.append(Sample(image_id, pixels, labels, split))
    extra = {k: v for k, v in manifest.items()
             if k not in ("num_classes", "class_names", "image_size", "seed", "counts")}
    return Dataset(samples, class_names, image_size, seed=manifest.get("seed"), root=root, extra=extra)


# ----------------------------------------------------------------- batching

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an HxWxC float array, pixel-centre aligned."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64, copy=True)

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    img = img.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def scaled_size(w: int, h: int, min_side: int) -> tuple[int, int]:
    """(w, h) after resizing so the shorter side equals ``min_side``."""
    if w <= h:
        return min_side, int(round(h * min_side / w))
    return int(round(w * min_side / h)), min_side


def image_tensor(pixels: np.ndarray, size: tuple[int, int] | None = None) -> np.ndarray:
    """[3, h, w] float array in [0, 1], resized to ``size`` = (w, h) if given."""
    img = pixels.astype(np.float64)
    if size is not None:
        img = resize_bilinear(img, size[1], size[0])
    return np.clip(img, 0, 255).transpose(2, 0, 1) / 255.0


@dataclass
class Batch:
    images: Tensor
    image_ids: list[str]
    labels: np.ndarray
    native_sizes: list[tuple[int, int]]
    size: tuple[int, int]

    @property
    def scale(self) -> tuple[float, float]:
        (w, h), (nw, nh) = self.size, self.native_sizes[0]
        return w / nw, h / nh


def multi_scale_batch(samples: Sequence[Sample], scales: Sequence[int], rng_seed) -> Batch:
    """Resize a batch so its shorter side equals one randomly drawn scale.

    The scale is drawn once per batch so the images stack into one NCHW array.
    """
    if not scales or min(scales) <= 0:
        raise ValueError(f"scales must be positive, got {scales}")
    rng = np.random.default_rng(rng_seed)
    s = int(scales[int(rng.integers(len(scales)))])
    sizes = {smp.size for smp in samples}
    if len(sizes) != 1:
        raise ValueError(f"multi_scale_batch needs equally sized images, got {sorted(sizes)}")
    w, h = next(iter(sizes))
    out = scaled_size(w, h, s)
    arr = np.stack([image_tensor(smp.pixels, out) for smp in samples])
    return Batch(Tensor(arr), [smp.image_id for smp in samples],
                 np.stack([smp.labels for smp in samples]), [smp.size for smp in samples], out)
