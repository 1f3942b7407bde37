"""Command-line entry point: ``wccn <command> [flags]``.

Exit codes: 0 success, 1 runtime failure (one ``error: ...`` line on stderr), 2 usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .cam import dump_cam, extract_cam
from .cascade import _stage_one, localize, single_batch
from .data import DatasetConfig, load_dataset, make_dataset, save_dataset
from .evaluate import evaluate, random_baseline_corloc, run_detection, run_localization, save_detections
from .hidden_gt import load_hidden_gt, read_boxes_jsonl
from .metrics import EvalReport, format_table
from .proposals import ProposalConfig, generate_proposals, load_proposals, save_proposals
from .raster import draw_box, write_ppm
from .train import Checkpoint, TrainConfig, build_model, export_pseudo_gt, retrain_supervised, train

log = logging.getLogger("wccn")

PROPOSALS_FILE = "proposals.jsonl"
CHECKPOINT_DIR = "checkpoint"
REPORT_FILE = "report.json"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- config chain

def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return d


def resolve_train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """defaults < --config file < explicit flags."""
    d = (base or TrainConfig()).to_json()
    file_cfg = _load_config_file(args.config)
    d.update({k: v for k, v in file_cfg.items() if k != "cascade"})
    d["cascade"].update(file_cfg.get("cascade", {}))
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("momentum", "momentum"), ("weight_decay", "weight_decay"), ("seed", "rng_seed")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if getattr(args, "scales", None):
        d["scales"] = [int(s) for s in args.scales.split(",")]
    for flag in ("stages", "pooling"):
        v = getattr(args, flag, None)
        if v is not None:
            d["cascade"][flag] = v
    try:
        return TrainConfig.from_json(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def resolve_data_config(args) -> DatasetConfig:
    d = _load_config_file(args.config)
    cfg = DatasetConfig()
    simple = {k: v for k, v in d.items() if k != "classes"}
    for k in ("objects_per_image", "object_size"):
        if k in simple:
            simple[k] = tuple(simple[k])
    try:
        cfg = replace(cfg, **simple)
    except TypeError as exc:
        raise UsageError(f"invalid dataset config: {exc}") from None
    for flag, key in (("seed", "rng_seed"), ("num_train", "num_train"), ("num_val", "num_val"),
                      ("num_test", "num_test"), ("image_size", "image_size")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg = replace(cfg, **{key: v})
    return cfg


# ----------------------------------------------------------------- helpers

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _proposals_for(dataset, run_dir: Path | None, out: Path):
    """Proposals cached in the run directory, else computed and written under --out."""
    for d in (run_dir, out):
        if d is not None and (d / PROPOSALS_FILE).exists():
            props = load_proposals(d / PROPOSALS_FILE)
            if all(s.image_id in props for s in dataset.samples):
                return props
    cfg = ProposalConfig()
    sets = [generate_proposals(s, cfg) for s in dataset.samples]
    save_proposals(out / PROPOSALS_FILE, sets)
    return {p.image_id: p for p in sets}


def _checkpoint(args) -> Checkpoint:
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(args.run) / CHECKPOINT_DIR
    return Checkpoint.load(path)


def _write_manifest(out: Path, command: str, config: dict, seed, started: float) -> None:
    manifest = {"command": command, "config": config, "seed": seed, "argv": sys.argv[1:],
                "versions": {"wccn": __version__, "python": platform.python_version(),
                             "numpy": np.__version__},
                "wall_seconds": round(time.time() - started, 3)}
    (out / f"run_manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> dict:
    cfg = resolve_data_config(args)
    ds, gt = make_dataset(cfg)
    save_dataset(_out(args), ds, gt)
    log.info("wrote %d images to %s", len(ds.samples), args.out)
    return {"dataset": ds.extra["config"], "seed": cfg.rng_seed}


def cmd_train(args) -> dict:
    out = _out(args)
    ds = load_dataset(args.data)
    resume = Checkpoint.load(args.resume) if args.resume else None
    cfg = resolve_train_config(args, resume.config if resume else None)
    props = _proposals_for(ds, None, out)
    result = train(ds, props, cfg, out_dir=out, resume=resume)
    log.info("trained %d epochs; checkpoint in %s", result.checkpoint.epoch, out / CHECKPOINT_DIR)
    return {"train": cfg.to_json(), "seed": cfg.rng_seed}


def cmd_eval(args) -> dict:
    out = _out(args)
    ds = load_dataset(args.data)
    gt = load_hidden_gt(args.data, ds.num_classes)
    ckpt = _checkpoint(args)
    model = build_model(ckpt)
    props = _proposals_for(ds, Path(args.run) if args.run else None, out)
    report = evaluate(model, ds, props, gt, ap_mode=args.ap_mode,
                      config={"train": ckpt.config.to_json(), "kind": ckpt.kind, "ap_mode": args.ap_mode})
    if args.random_baseline and hasattr(model, "loc"):
        loc = run_localization(model, ds.split("train", "val"), props)
        report.config["random_baseline_corloc"] = random_baseline_corloc(ds, gt, reference=loc)
    (out / REPORT_FILE).write_text(report.dumps() + "\n")
    (out / "report.txt").write_text(report.table())
    sys.stdout.write(report.table())
    return {"ap_mode": args.ap_mode, "checkpoint": str(args.checkpoint or args.run), "seed": ckpt.config.rng_seed}


def _select(ds, args):
    if args.images:
        wanted = args.images.split(",")
        missing = [i for i in wanted if i not in ds.by_id]
        if missing:
            raise KeyError(f"unknown image ids: {','.join(missing)}")
        return [ds.by_id[i] for i in wanted]
    return ds.split(*args.split.split(","))


def cmd_cam(args) -> dict:
    out = _out(args)
    ds = load_dataset(args.data)
    model = build_model(_checkpoint(args))
    if not hasattr(model, "loc"):
        raise ValueError("cam needs a cascade checkpoint")
    props = _proposals_for(ds, Path(args.run) if args.run else None, out)
    samples = _select(ds, args)[:args.limit]
    colors = [(255, 255, 255), (255, 0, 255), (0, 255, 255), (255, 128, 0)]
    for s in samples:
        batch = single_batch([s])
        _, _, maps = _stage_one(model, batch)
        cam = extract_cam(maps.data[0], s.present_classes, s.size)
        dump_cam(cam, out, s.image_id)
        loc = localize(model, s, props[s.image_id].boxes)
        canvas = s.pixels.copy()
        for c in s.present_classes:
            for j in loc.candidates[c]:
                draw_box(canvas, props[s.image_id].boxes[j], (128, 128, 128))
            if c in loc.boxes:
                draw_box(canvas, loc.boxes[c], colors[(c - 1) % len(colors)])
        write_ppm(out / f"{s.image_id}_boxes.ppm", canvas)
    log.info("wrote CAMs for %d images to %s", len(samples), out)
    return {"images": [s.image_id for s in samples]}


def cmd_detect(args) -> dict:
    out = _out(args)
    ds = load_dataset(args.data)
    model = build_model(_checkpoint(args))
    props = _proposals_for(ds, Path(args.run) if args.run else None, out)
    dets = run_detection(model, _select(ds, args), props, nms_iou=args.nms_iou)
    if args.score_min > 0:
        dets = {k: [b for b in v if b.score >= args.score_min] for k, v in dets.items()}
    save_detections(out / "detections.jsonl", dets)
    return {"nms_iou": args.nms_iou, "score_min": args.score_min}


def cmd_export_pseudo_gt(args) -> dict:
    out = _out(args)
    ds = load_dataset(args.data)
    model = build_model(_checkpoint(args))
    props = _proposals_for(ds, Path(args.run) if args.run else None, out)
    boxes = export_pseudo_gt(model, ds.split("train"), props, out / "pseudo_gt.jsonl")
    log.info("exported %d pseudo boxes", sum(len(v) for v in boxes.values()))
    return {}


def cmd_retrain_detector(args) -> dict:
    out = _out(args)
    ds = load_dataset(args.data)
    if args.leak_true_gt:
        boxes = load_hidden_gt(args.data, ds.num_classes)
        log.warning("training on TRUE box annotations (supervised upper baseline)")
    elif args.pseudo_gt:
        boxes = read_boxes_jsonl(args.pseudo_gt, ds.num_classes)
    else:
        raise UsageError("retrain-detector needs --pseudo-gt FILE or --leak-true-gt")
    cfg = resolve_train_config(args)
    props = _proposals_for(ds, Path(args.run) if args.run else None, out)
    retrain_supervised(ds, boxes, props, cfg, out_dir=out)
    return {"train": cfg.to_json(), "seed": cfg.rng_seed, "leak_true_gt": bool(args.leak_true_gt)}


def _load_report(run: str) -> EvalReport:
    p = Path(run)
    p = p / REPORT_FILE if p.is_dir() else p
    d = json.loads(p.read_text(encoding="utf-8"))
    names = d.get("class_names") or list(d["cls_ap"] or d["ap"] or d["corloc"])
    idx = lambda m: {names.index(k) + 1: v for k, v in m.items()}
    return EvalReport(names, idx(d["ap"]), idx(d["corloc"]), idx(d["cls_ap"]),
                      d.get("top1_cls_error"), d.get("top1_loc_error"), d.get("config", {}))


def compare_reports(labels: Sequence[str], reports: Sequence[EvalReport]) -> str:
    """Side-by-side table, then per-class deltas of every run against the first."""
    text = format_table(list(zip(labels, reports)))
    base = reports[0]
    deltas = []
    for label, rep in zip(labels[1:], reports[1:]):
        d = EvalReport(base.class_names)
        for attr in ("ap", "corloc", "cls_ap"):
            a, b = getattr(base, attr), getattr(rep, attr)
            setattr(d, attr, {c: b[c] - a[c] for c in a if c in b})
        deltas.append((f"{label}-{labels[0]}", d))
    if deltas:
        text += "\n" + format_table(deltas)
    return text


def cmd_compare(args) -> dict:
    out = _out(args)
    runs = [r for r in args.runs.split(",") if r]
    if len(runs) < 2:
        raise UsageError("compare needs at least two runs")
    labels = args.labels.split(",") if args.labels else [Path(r).name or r for r in runs]
    if len(labels) != len(runs):
        raise UsageError("--labels must name every run")
    text = compare_reports(labels, [_load_report(r) for r in runs])
    (out / "compare.txt").write_text(text)
    sys.stdout.write(text)
    return {"runs": runs}


# ----------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: usage: {message}\n")
        raise SystemExit(2)


def _train_flags(p) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--scales", help="comma-separated training shorter sides, e.g. 56,64,72")
    p.add_argument("--stages", choices=("two", "three"))
    p.add_argument("--pooling", choices=("gap", "gmp"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wccn", description="Weakly supervised cascaded detection on synthetic shapes.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--out", required=True, help="directory for every file this command writes")
        p.add_argument("--config", help="JSON file overriding defaults (flags override it)")
        return p

    p = command("gen-data", cmd_gen_data, "render a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-val", type=int)
    p.add_argument("--num-test", type=int)
    p.add_argument("--image-size", type=int)

    p = command("train", cmd_train, "train the cascade from image labels")
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    _train_flags(p)

    def model_cmd(name, fn, help_):
        p = command(name, fn, help_)
        p.add_argument("--data", required=True)
        p.add_argument("--run", help="training output directory")
        p.add_argument("--checkpoint", help="checkpoint directory (default RUN/checkpoint)")
        return p

    p = model_cmd("eval", cmd_eval, "score a checkpoint: AP, CorLoc, classification AP")
    p.add_argument("--ap-mode", choices=("all", "voc11"), default="all")
    p.add_argument("--random-baseline", action="store_true", help="also report random-box CorLoc")

    for name, fn, help_ in (("cam", cmd_cam, "dump CAM heatmaps and box overlays"),
                            ("detect", cmd_detect, "write scored detections")):
        p = model_cmd(name, fn, help_)
        p.add_argument("--split", default="test")
        p.add_argument("--images", help="comma-separated image ids (overrides --split)")
        if name == "cam":
            p.add_argument("--limit", type=int, default=8)
        else:
            p.add_argument("--nms-iou", type=float, default=0.3)
            p.add_argument("--score-min", type=float, default=0.0)

    model_cmd("export-pseudo-gt", cmd_export_pseudo_gt, "write MIL-argmax boxes for train images")

    p = command("retrain-detector", cmd_retrain_detector, "supervised detector on pseudo boxes")
    p.add_argument("--data", required=True)
    p.add_argument("--run", help="directory with cached proposals")
    p.add_argument("--pseudo-gt", help="boxes file from export-pseudo-gt")
    p.add_argument("--leak-true-gt", action="store_true",
                   help="train on the real box annotations (upper baseline; breaks weak supervision)")
    _train_flags(p)

    p = command("compare", cmd_compare, "side-by-side reports with per-class deltas")
    p.add_argument("--runs", required=True, help="comma-separated run dirs or report files")
    p.add_argument("--labels")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command not in ("gen-data", "compare") and not getattr(args, "run", None) \
            and not getattr(args, "checkpoint", True):
        parser.error(f"{args.command} needs --run or --checkpoint")
    started = time.time()
    try:
        info = args.fn(args)
        _write_manifest(Path(args.out), args.command, info, info.get("seed"), started)
    except UsageError as exc:
        sys.stderr.write(f"error: usage: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"error: {args.command}: {type(exc).__name__}: {msg}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
