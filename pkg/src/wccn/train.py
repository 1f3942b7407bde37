"""SGD training of the cascade, checkpoints, pseudo-GT export and supervised retraining.

Nothing in here reads box annotations from disk; supervised retraining gets
its boxes passed in by the caller.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .boxes import Box, iou_matrix
from .cascade import Cascade, CascadeConfig, localize, single_batch, _feature_roi, _scaled_proposals
from .data import Dataset, Sample, multi_scale_batch, write_boxes_jsonl
from .layers import MILHead, ParamRegistry, Trunk, init_params
from .proposals import ProposalSet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_HEADER = ["epoch", "loss_gap", "loss_mil", "loss_seg", "loss_total", "seconds"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    rng_seed: int = 0
    scales: tuple[int, ...] = (56, 64, 72)
    cascade: CascadeConfig = CascadeConfig()
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "cascade"}
        d["scales"] = list(self.scales)
        d["cascade"] = self.cascade.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "cascade" in d:
            d["cascade"] = CascadeConfig.from_json(d["cascade"])
        if "scales" in d:
            d["scales"] = tuple(int(s) for s in d["scales"])
        return cls(**d)


class SGD:
    """Momentum SGD: v <- mu v + (g + wd p); p <- p - lr v."""

    def __init__(self, params: ParamRegistry, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params, self.lr, self.momentum, self.weight_decay = params, lr, momentum, weight_decay
        self.buffers = {k: np.zeros(t.shape) for k, t in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            v = self.buffers[name]
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data = p.data - self.lr * v


# ----------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    epoch: int
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    rng_state: dict = field(default_factory=dict)
    kind: str = "cascade"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"momentum/{k}": v for k, v in self.momentum.items()})
        ad.save_tensors(path / "tensors.wccn", tensors)
        state = {"format_version": CHECKPOINT_VERSION, "kind": self.kind, "step": self.step,
                 "epoch": self.epoch, "rng_state": self.rng_state, "config": self.config.to_json()}
        (path / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            state = json.loads((path / "state.json").read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"missing file: {path / 'state.json'}") from None
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {state.get('format_version')}")
        tensors = ad.load_tensors(path / "tensors.wccn")
        params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        momentum = {k[len("momentum/"):]: v for k, v in tensors.items() if k.startswith("momentum/")}
        return cls(TrainConfig.from_json(state["config"]), state["step"], state["epoch"], params,
                   momentum, state.get("rng_state", {}), state.get("kind", "cascade"))


def build_model(ckpt: Checkpoint):
    cfg = ckpt.config.cascade
    model = Detector(cfg) if ckpt.kind == "detector" else Cascade(cfg, ckpt.config.rng_seed)
    model.params.load_state_dict(ckpt.params)
    return model


# ----------------------------------------------------------------- training

def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, 0x5EED])


def _proposal_boxes(proposals: Mapping[str, ProposalSet | Sequence[Box]], image_id: str) -> list[Box]:
    try:
        p = proposals[image_id]
    except KeyError:
        raise TrainingError(f"no proposals for image {image_id}") from None
    return list(p.boxes if isinstance(p, ProposalSet) else p)


def _write_metrics(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRICS_HEADER[1:-1]] + [f"{r['seconds']:.3f}"])
    path.write_text(buf.getvalue())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    model: object


def _run_epochs(model, params: ParamRegistry, train: list[Sample], cfg: TrainConfig,
                step_fn: Callable, start_epoch: int = 0, step: int = 0,
                momentum: Mapping[str, np.ndarray] | None = None, out_dir: Path | None = None,
                kind: str = "cascade", metrics: list[dict] | None = None) -> TrainResult:
    opt = SGD(params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    if momentum:
        for k, v in momentum.items():
            opt.buffers[k] = np.array(v, dtype=np.float64)
    metrics = list(metrics or [])
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = _epoch_rng(cfg.rng_seed, epoch)
        order = rng.permutation(len(train))
        sums: dict[str, float] = {"gap": 0.0, "mil": 0.0, "seg": 0.0, "total": 0.0}
        nb = 0
        for b in range(0, len(order), cfg.batch_size):
            chunk = [train[i] for i in order[b:b + cfg.batch_size]]
            batch = multi_scale_batch(chunk, cfg.scales, int(rng.integers(2 ** 63)))
            params.zero_grad()
            with ad.new_graph() as graph:
                losses, total = step_fn(batch)
                if not all(np.isfinite(v) for v in losses.values()):
                    raise TrainingError(f"non-finite loss {losses} in batch with images {batch.image_ids}")
                ad.backward(total)
                graph.release()
            opt.step()
            step += 1
            nb += 1
            for k in sums:
                sums[k] += losses.get(k, 0.0)
        row = {"epoch": epoch + 1, **{f"loss_{k}": v / nb for k, v in sums.items()},
               "seconds": time.perf_counter() - t0}
        metrics.append(row)
        log.info("epoch %d gap %.4f mil %.4f seg %.4f total %.4f (%.1fs)", epoch + 1, row["loss_gap"],
                 row["loss_mil"], row["loss_seg"], row["loss_total"], row["seconds"])
        ckpt = Checkpoint(cfg, step, epoch + 1, params.state_dict(),
                          {k: v.copy() for k, v in opt.buffers.items()},
                          {"seed": cfg.rng_seed, "next_epoch": epoch + 1}, kind)
        if out_dir is not None:
            _write_metrics(out_dir / "metrics.csv", metrics)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                ckpt.save(out_dir / f"checkpoint_epoch{epoch + 1:03d}")
            ckpt.save(out_dir / "checkpoint")
    if cfg.epochs <= start_epoch:
        ckpt = Checkpoint(cfg, step, start_epoch, params.state_dict(), dict(opt.buffers),
                          {"seed": cfg.rng_seed, "next_epoch": start_epoch}, kind)
    return TrainResult(ckpt, metrics, model)


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open() as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def train(dataset: Dataset, proposals: Mapping[str, ProposalSet], config: TrainConfig,
          out_dir: str | Path | None = None, resume: Checkpoint | None = None) -> TrainResult:
    """Train the cascade on the train split with image-level labels only."""
    train_samples = dataset.split("train")
    if not train_samples:
        raise TrainingError("dataset has no training images")
    props = {s.image_id: _proposal_boxes(proposals, s.image_id) for s in train_samples}
    if config.cascade.num_classes != dataset.num_classes:
        config = replace(config, cascade=replace(config.cascade, num_classes=dataset.num_classes))
    model = Cascade(config.cascade, config.rng_seed)
    start, step, momentum, metrics = 0, 0, None, []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        model.params.load_state_dict(resume.params)
        start, step, momentum = resume.epoch, resume.step, resume.momentum
        if out is not None and (out / "metrics.csv").exists():
            metrics = read_metrics(out / "metrics.csv")[:start]

    def step_fn(batch):
        rec = model.forward(batch, [props[i] for i in batch.image_ids])
        return rec.losses, rec.total

    return _run_epochs(model, model.params, train_samples, config, step_fn, start, step, momentum,
                       out, "cascade", metrics)


# ----------------------------------------------------------------- pseudo GT

def export_pseudo_gt(model: Cascade, samples: Sequence[Sample], proposals: Mapping[str, ProposalSet],
                     path: str | Path | None = None) -> dict[str, list[Box]]:
    """Per training image and present class, the MIL argmax box among its candidates."""
    out: dict[str, list[Box]] = {}
    for s in samples:
        loc = localize(model, s, _proposal_boxes(proposals, s.image_id), fallback=False)
        for c in s.present_classes:
            if c not in loc.boxes:
                log.warning("image %s class %d has no candidates; omitted from pseudo GT", s.image_id, c)
        out[s.image_id] = [loc.boxes[c].with_(score=None) for c in s.present_classes if c in loc.boxes]
    if path is not None:
        write_boxes_jsonl(path, out, order=[s.image_id for s in samples])
    return out


# ----------------------------------------------------------------- supervised retraining

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3


class Detector:
    """Fresh trunk + ROI pooling + FC head over C+1 outputs (last = background)."""

    def __init__(self, cfg: CascadeConfig, seed: int = 0) -> None:
        self.cfg = cfg
        arch = cfg.arch
        self.params = ParamRegistry()
        self.trunk = Trunk(self.params, arch)
        self.mil = MILHead(self.params, arch, self.trunk.out_channels, prefix="det",
                           num_outputs=cfg.num_classes + 1)
        for layer in self.trunk.layers + self.mil.layers:
            init_params(layer, seed)


def assign_labels(proposals: Sequence[Box], boxes: Sequence[Box], num_classes: int) -> np.ndarray:
    """0-based class per proposal: object class if IoU >= 0.5, background (C) if < 0.3, else -1."""
    if not proposals:
        return np.zeros(0, dtype=np.int64)
    if not boxes:
        return np.full(len(proposals), num_classes, dtype=np.int64)
    m = iou_matrix(proposals, boxes)
    best = m.argmax(axis=1)
    top = m[np.arange(len(proposals)), best]
    labels = np.full(len(proposals), -1, dtype=np.int64)
    pos = top >= POSITIVE_IOU
    labels[pos] = [boxes[j].class_id - 1 for j in best[pos]]
    labels[top < NEGATIVE_IOU] = num_classes
    return labels


def retrain_supervised(dataset: Dataset, boxes: Mapping[str, Sequence[Box]],
                       proposals: Mapping[str, ProposalSet], config: TrainConfig,
                       out_dir: str | Path | None = None, rois_per_image: int = 32,
                       fg_fraction: float = 0.25) -> TrainResult:
    """Fast-RCNN-style training of a fresh detector on (pseudo) box labels."""
    train_samples = [s for s in dataset.split("train") if s.image_id in boxes]
    if not train_samples:
        raise TrainingError("no training images with boxes")
    C = dataset.num_classes
    cfg = replace(config, cascade=replace(config.cascade, num_classes=C))
    model = Detector(cfg.cascade, cfg.rng_seed)
    props = {s.image_id: _proposal_boxes(proposals, s.image_id) for s in train_samples}
    labels = {s.image_id: assign_labels(props[s.image_id], list(boxes[s.image_id]), C) for s in train_samples}
    for c in range(C):
        if not any((lab == c).any() for lab in labels.values()):
            log.warning("class %d has no positive proposals; it is skipped", c + 1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def step_fn(batch):
        rng = np.random.default_rng([cfg.rng_seed, zlib.crc32("|".join(batch.image_ids).encode())])
        feats = model.trunk(batch.images)
        fsize = (feats.shape[3], feats.shape[2])
        rois, owners, targets = [], [], []
        for n, image_id in enumerate(batch.image_ids):
            lab = labels[image_id]
            fg = np.flatnonzero((lab >= 0) & (lab < C))
            bg = np.flatnonzero(lab == C)
            n_fg = min(len(fg), int(round(rois_per_image * fg_fraction)))
            fg = rng.choice(fg, n_fg, replace=False) if n_fg else fg[:0]
            bg = rng.choice(bg, min(len(bg), rois_per_image - n_fg), replace=False) if len(bg) else bg
            scaled = _scaled_proposals(props[image_id], batch.native_sizes[n], batch.size)
            for j in np.concatenate([np.sort(fg), np.sort(bg)]).astype(int):
                rois.append(_feature_roi(scaled[j], batch.size, fsize))
                owners.append(n)
                targets.append(int(lab[j]))
        logits = model.mil(feats, rois, owners)
        logp = ad.log_softmax_axis(logits, axis=1)
        t = np.asarray(targets)
        picked = ad.take(logp, np.arange(len(t)) * (C + 1) + t)
        loss = ad.scale(ad.sum_axis(picked), -1.0 / len(t))
        v = float(loss.item())
        return {"gap": 0.0, "mil": v, "seg": 0.0, "total": v}, loss

    return _run_epochs(model, model.params, train_samples, cfg, step_fn, out_dir=out, kind="detector")
