import csv
import json

import numpy as np
import pytest

from rangeudf.cli import RunConfig, run, set_threads
from rangeudf.errors import ValidationError
from rangeudf.geomcore import read_points_ply, write_ply


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag():
    assert run(["eval", "--pred", "a.ply"]) == 1


def test_missing_file_is_io_error(tmp_path, capsys):
    assert run(["eval", "--pred", str(tmp_path / "nope.ply"), "--gt", str(tmp_path / "nope.ply")]) == 2
    assert "io error" in capsys.readouterr().err


def test_eval_identity(tmp_path, capsys):
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(500, 3))
    write_ply(tmp_path / "p.ply", pts)
    out = tmp_path / "r.json"
    assert run(["eval", "--pred", str(tmp_path / "p.ply"), "--gt", str(tmp_path / "p.ply"), "--out", str(out)]) == 0
    text = out.read_text()
    rep = json.loads(text)["reconstruction"]
    assert rep["cd_l1"] == 0.0 and rep["fs_delta"] == 1.0
    assert list(rep) == sorted(rep)
    # stable output: a second run is byte-identical
    out2 = tmp_path / "r2.json"
    run(["eval", "--pred", str(tmp_path / "p.ply"), "--gt", str(tmp_path / "p.ply"), "--out", str(out2)])
    assert out2.read_text() == text


def test_eval_with_labels(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.5, 0.5, size=(200, 3))
    lab = rng.integers(0, 3, size=200)
    write_ply(tmp_path / "p.ply", pts, vertex_labels=lab)
    out = tmp_path / "r.json"
    assert run(["eval", "--pred", str(tmp_path / "p.ply"), "--gt", str(tmp_path / "p.ply"),
                "--classes", "3", "--out", str(out)]) == 0
    seg = json.loads(out.read_text())["segmentation"]
    assert seg["miou"] == 1.0 and seg["oa"] == 1.0


def test_eval_classes_need_labels(tmp_path):
    write_ply(tmp_path / "p.ply", np.zeros((3, 3)))
    assert run(["eval", "--pred", str(tmp_path / "p.ply"), "--gt", str(tmp_path / "p.ply"), "--classes", "2"]) == 1


def test_run_config_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lr": 1e-3}, "extraction": {"n_min": 10, "colour": 1}}))
    with pytest.raises(ValidationError, match="colour"):
        RunConfig.load(cfg)
    cfg.write_text(json.dumps({"optimizer": "sgd"}))
    with pytest.raises(ValidationError):
        RunConfig.load(cfg)
    cfg.write_text(json.dumps({"train": {"lr": 1e-3, "momentum": 0.9}}))
    with pytest.raises(ValidationError):
        RunConfig.load(cfg)
    cfg.write_text("{not json")
    with pytest.raises(ValidationError, match="line 1"):
        RunConfig.load(cfg)


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"batch_scenes": 0}}))
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "m.ruck"), "--data", "x.ruqs"]) == 1


def test_threads(monkeypatch):
    assert set_threads(1) == 1
    monkeypatch.setenv("RANGEUDF_THREADS", "1")
    assert set_threads(None) == 1
    monkeypatch.setenv("RANGEUDF_THREADS", "many")
    with pytest.raises(ValidationError):
        set_threads(None)


def test_gen_scenes_spec_and_seed(tmp_path):
    assert run(["gen-scenes", "--count", "2", "--density", "3", "--out-dir", str(tmp_path / "a"), "--seed", "4"]) == 0
    assert run(["gen-scenes", "--count", "2", "--density", "3", "--out-dir", str(tmp_path / "b"), "--seed", "4"]) == 0
    for name in ("scene_000.ply", "scene_001.ply", "scene_000.labels"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    spec = tmp_path / "a" / "scene_001.json"
    assert run(["gen-scenes", "--spec", str(spec), "--out-dir", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "scene_000.ply").read_bytes() == (tmp_path / "a" / "scene_001.ply").read_bytes()


@pytest.mark.slow
def test_smoke_pipeline(tmp_path):
    d = tmp_path
    assert run(["gen-scenes", "--count", "1", "--density", "6", "--out-dir", str(d)]) == 0
    mesh = d / "scene_000.ply"
    assert run(["gen-data", str(mesh), "--out", str(d / "s.ruqs"), "--n-on", "2000", "--n-off", "6000"]) == 0
    cfg = d / "run.json"
    cfg.write_text(json.dumps({
        "train": {"batch_scenes": 1, "queries_per_scene": 512, "surface_points": 2000, "n_classes": 3},
        "extraction": {"n_min": 5000, "resolution": 48},
        "metrics": {"gt_samples": 5000},
    }))
    ckpt = d / "m.ruck"
    assert run(["train", "--data", str(d / "s.ruqs"), "--config", str(cfg), "--out", str(ckpt), "--steps", "200"]) == 0
    with open(d / "m.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["step"] == "200"
    assert run(["reconstruct", "--checkpoint", str(ckpt), "--cloud", str(d / "s.ruqs"), "--config", str(cfg),
                "--points", str(d / "dense.ply"), "--mesh", str(d / "mesh.ply")]) == 0
    pts, labels = read_points_ply(d / "dense.ply")
    assert len(pts) >= 5000 and labels is not None and labels.max() < 3
    assert run(["segment", "--checkpoint", str(ckpt), "--cloud", str(d / "s.ruqs"),
                "--points", str(d / "dense.ply"), "--out", str(d / "seg.ply")]) == 0
    out = d / "report.json"
    assert run(["eval", "--pred", str(d / "dense.ply"), "--gt", str(mesh), "--config", str(cfg),
                "--out", str(out)]) == 0
    rep = json.loads(out.read_text())["reconstruction"]
    assert all(np.isfinite(v) for v in rep.values())
    assert rep["fs_delta"] <= rep["fs_2delta"] <= rep["fs_4delta"]
