import json
import subprocess
import sys

import pytest

from wccn.cli import main
from wccn.data import load_dataset
from wccn.evaluate import load_detections
from wccn.hidden_gt import read_boxes_jsonl
from wccn.proposals import load_proposals
from wccn.train import Checkpoint

TINY = ["--num-train", "8", "--num-val", "2", "--num-test", "3"]
QUICK = ["--epochs", "1", "--batch-size", "4", "--scales", "64"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run, three = root / "data", root / "run", root / "run3"
    assert main(["gen-data", "--seed", "7", "--out", str(data)] + TINY) == 0
    assert main(["train", "--data", str(data), "--out", str(run)] + QUICK) == 0
    assert main(["train", "--data", str(data), "--out", str(three), "--stages", "three"] + QUICK) == 0
    for r in (run, three):
        assert main(["eval", "--data", str(data), "--run", str(r), "--out", str(r)]) == 0
    return root, data, run, three


def _tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and not p.name.startswith("run_manifest")}


def test_gen_data_twice_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--seed", "7", "--out", str(a)] + TINY) == 0
    assert main(["gen-data", "--seed", "7", "--out", str(b)] + TINY) == 0
    assert _tree_bytes(a) == _tree_bytes(b)
    manifest = json.loads((a / "run_manifest_gen-data.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 7
    assert {"argv", "versions", "wall_seconds", "config"} <= set(manifest)


def test_train_then_eval_writes_report(pipeline):
    root, data, run, three = pipeline
    for r in (run, three):
        rep = json.loads((r / "report.json").read_text())
        assert {"ap", "map", "corloc", "mean_corloc", "cls_ap", "top1_loc_error"} <= set(rep)
        assert (r / "report.txt").exists() and (r / "metrics.csv").exists()
        assert (r / "run_manifest_train.json").exists() and (r / "run_manifest_eval.json").exists()
    assert json.loads((three / "checkpoint" / "state.json").read_text())["config"]["cascade"]["stages"] == "three"


def test_compare_prints_deltas(pipeline, capsys):
    root, _, run, three = pipeline
    capsys.readouterr()
    assert main(["compare", "--runs", f"{run},{three}", "--labels", "two,three", "--out", str(root / "cmp")]) == 0
    text = capsys.readouterr().out
    assert "three-two" in text and "CorLoc" in text
    assert (root / "cmp" / "compare.txt").read_text() == text


def test_artifacts_round_trip(pipeline):
    root, data, run, _ = pipeline
    ds = load_dataset(data)
    props = load_proposals(run / "proposals.jsonl")
    assert set(props) == {s.image_id for s in ds.samples}
    ck = Checkpoint.load(run / "checkpoint")
    assert ck.epoch == 1
    out = root / "det"
    assert main(["detect", "--data", str(data), "--run", str(run), "--out", str(out), "--score-min", "0.3"]) == 0
    dets = load_detections(out / "detections.jsonl")
    assert set(dets) == {s.image_id for s in ds.split("test")}
    assert all(b.score >= 0.3 for v in dets.values() for b in v)
    pg = root / "pg"
    assert main(["export-pseudo-gt", "--data", str(data), "--run", str(run), "--out", str(pg)]) == 0
    boxes = read_boxes_jsonl(pg / "pseudo_gt.jsonl", ds.num_classes)
    assert set(boxes) == {s.image_id for s in ds.split("train")}
    rt = root / "retrain"
    assert main(["retrain-detector", "--data", str(data), "--run", str(run), "--pseudo-gt",
                 str(pg / "pseudo_gt.jsonl"), "--out", str(rt)] + QUICK) == 0
    assert Checkpoint.load(rt / "checkpoint").kind == "detector"
    assert main(["eval", "--data", str(data), "--run", str(rt), "--out", str(rt)]) == 0
    cam = root / "cam"
    assert main(["cam", "--data", str(data), "--run", str(run), "--out", str(cam), "--limit", "2"]) == 0
    assert len(list(cam.glob("*_boxes.ppm"))) == 2 and list(cam.glob("*.pgm"))


def test_resume_flag(pipeline, tmp_path):
    _, data, run, _ = pipeline
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--resume", str(run / "checkpoint"),
                 "--epochs", "2"]) == 0
    assert Checkpoint.load(tmp_path / "checkpoint").epoch == 2


def test_config_file_and_flag_precedence(pipeline, tmp_path):
    _, data, _, _ = pipeline
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch_size": 8, "learning_rate": 0.5, "scales": [64]}))
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", str(cfg),
                 "--lr", "0.001"]) == 0
    state = json.loads((tmp_path / "r" / "checkpoint" / "state.json").read_text())["config"]
    assert state["batch_size"] == 8 and state["learning_rate"] == 0.001


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", str(tmp_path), "--bogus"])
    assert e.value.code == 2
    assert main(["eval", "--data", str(tmp_path / "nope"), "--run", str(tmp_path), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: eval: DatasetError:")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["gen-data", "--out", str(tmp_path / "g"), "--config", str(bad)]) == 2
    assert main(["retrain-detector", "--data", str(tmp_path), "--out", str(tmp_path)]) in (1, 2)


def test_eval_refuses_weak_only_dataset(pipeline, tmp_path, capsys):
    _, data, run, _ = pipeline
    weak = tmp_path / "weak"
    assert main(["gen-data", "--seed", "7", "--out", str(weak)] + TINY) == 0
    (weak / "gt_boxes.jsonl").unlink()
    assert main(["eval", "--data", str(weak), "--run", str(run), "--out", str(tmp_path / "e")]) == 1
    assert "MissingGroundTruth" in capsys.readouterr().err


def test_module_entry_point_usage_error():
    proc = subprocess.run([sys.executable, "-m", "wccn", "train", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "wccn", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
