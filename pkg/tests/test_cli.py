import json

import pytest

from lstmp.cli import main

SPEC = {"n_objects": 8, "n_heldout": 2, "D_v": 16, "n_train": 240, "n_test_per_heldout": 20, "n_test_random": 10}
CONFIG = {"D_w": 12, "D_h": 16, "lm_epochs": 2, "joint_epochs": 2}


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(root, variant="lstm-p"):
    root.mkdir(exist_ok=True)
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "cfg.json").write_text(json.dumps(CONFIG))
    assert run("gen-data", "--spec", root / "spec.json", "--seed", 4, "--out", root / "corpus") == 0
    assert run("train-detector", "--corpus", root / "corpus", "--out", root / "det.json") == 0
    assert run("pretrain-lm", "--corpus", root / "corpus", "--config", root / "cfg.json", "--out", root / "lm.json") == 0
    assert run("train", "--corpus", root / "corpus", "--detector", root / "det.json", "--init", root / "lm.json",
               "--config", root / "cfg.json", "--variant", variant, "--out", root / "model.json") == 0
    assert run("caption", "--model", root / "model.json", "--detector", root / "det.json", "--corpus", root / "corpus",
               "--out", root / "captions.jsonl") == 0
    assert run("eval", "--captions", root / "captions.jsonl", "--corpus", root / "corpus",
               "--out", root / "report.json") == 0
    return root


def test_pipeline_is_byte_deterministic(tmp_path):
    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    rows = [json.loads(line) for line in (a / "captions.jsonl").read_text().splitlines()]
    assert len(rows) == 2 * 20 + 10
    assert all(len(r["tokens"]) == len(r["gates"]) for r in rows)
    log = [json.loads(line) for line in (a / "model.json.runlog.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1]
    assert set(log[0]) == {"epoch", "sequential", "coverage", "pointing_aux", "total"}


def test_baseline_never_names_heldout_objects(tmp_path):
    root = pipeline(tmp_path, variant="baseline")
    report = json.loads((root / "report.json").read_text())
    assert report["f1_average"] == 0.0
    rows = [json.loads(line) for line in (root / "captions.jsonl").read_text().splitlines()]
    assert all(pc == 0.0 for r in rows for _, pc in r["gates"])


def test_gradcheck_exit_codes(capsys):
    assert run("gradcheck") == 0
    assert "max relative error" in capsys.readouterr().out
    assert run("gradcheck", "--h", 0.5) == 3


def test_usage_and_data_errors(tmp_path, capsys):
    assert run() == 1
    assert run("train", "--corpus", "x") == 1
    assert run("sweep-lambda", "--values", "a,b") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 3 and all(line.startswith("lstmp: usage error:") for line in err)
    assert run("train-detector", "--corpus", tmp_path / "missing", "--out", tmp_path / "d.json") == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert run("gen-data", "--spec", tmp_path / "bad.json", "--out", tmp_path / "c") == 2
    (tmp_path / "bad.json").write_text('{"n_objectz": 3}')
    assert run("gen-data", "--spec", tmp_path / "bad.json", "--out", tmp_path / "c") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 3 and all(line.startswith("lstmp: error:") for line in err)


def test_eval_rejects_unknown_images(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    assert run("gen-data", "--spec", tmp_path / "spec.json", "--out", tmp_path / "corpus") == 0
    (tmp_path / "caps.jsonl").write_text(json.dumps({"image_id": 10 ** 6, "tokens": ["a"]}) + "\n")
    assert run("eval", "--captions", tmp_path / "caps.jsonl", "--corpus", tmp_path / "corpus",
               "--out", tmp_path / "r.json") == 2
    (tmp_path / "caps.jsonl").write_text("{}\n")
    assert run("eval", "--captions", tmp_path / "caps.jsonl", "--corpus", tmp_path / "corpus",
               "--out", tmp_path / "r.json") == 2
