import json

import numpy as np
import pytest

from lcew import io, stgcnn
from lcew.cli import bundled_scene_path, run_command
from lcew.trajdata import write_trajectory_file

from conftest import lane_change_track, make_track


def run(*argv):
    return run_command([str(a) for a in argv])


@pytest.fixture
def recording(tmp_path):
    """Two merging vehicles with company in the target lane."""
    tracks = [lane_change_track(1, hold_before=4.0, sweep=4.0, hold_after=4.0, speed=20.0),
              lane_change_track(2, hold_before=5.0, sweep=4.0, hold_after=3.0, speed=21.0, x0=60.0)]
    n = tracks[0].t.size
    tracks.append(make_track(3, 25.0 + 19.0 * 0.1 * np.arange(n), np.full(n, 3.5)))
    path = tmp_path / "rec.csv"
    write_trajectory_file(path, tracks)
    return path


def test_predict_on_bundled_scene_is_persistence(tmp_path, capsys):
    assert run("predict", "--out", tmp_path) == 0
    head, recs = io.read_jsonl(tmp_path / "predictions.jsonl", "predictions")
    (sc,) = io.read_scenes(bundled_scene_path())
    pred = np.asarray(recs[0]["pred"])
    np.testing.assert_array_equal(pred, stgcnn.persistence(sc, pred.shape[0]))
    assert head["seed"] == 0 and len(head["config_hash"]) == 16


def test_unknown_key_exits_2_and_names_it(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 1\n[sim.driver]\nfoo = 3\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path) == 2
    assert "sim.driver.foo" in capsys.readouterr().err
    cfg.write_text("seed = 1\nwhatever = 2\n")
    assert run("predict", "--config", cfg, "--out", tmp_path) == 2
    assert "whatever" in capsys.readouterr().err


def test_missing_input_is_runtime_error(tmp_path, capsys):
    assert run("ingest", "--input", tmp_path / "nope.csv", "--out", tmp_path) == 1


def test_warn_requires_predictions(tmp_path):
    assert run("predict", "--out", tmp_path) == 0
    assert run("detect", "--input", tmp_path / "predictions.jsonl", "--out", tmp_path) == 0
    assert run("warn", "--input", tmp_path / "collisions.jsonl", "--out", tmp_path) == 2


def _pipeline(rec, out, cfg):
    assert run("ingest", "--input", rec, "--out", out) == 0
    assert run("extract", "--input", out / "tracks.jsonl", "--config", cfg, "--out", out) == 0
    assert run("train", "--input", out / "scenes.jsonl", "--config", cfg, "--out", out) == 0
    assert run("predict", "--input", out / "scenes.jsonl", "--params", out / "params.bin",
               "--config", cfg, "--out", out) == 0
    assert run("detect", "--input", out / "predictions.jsonl", "--config", cfg, "--out", out) == 0
    assert run("warn", "--input", out / "collisions.jsonl", "--predictions", out / "predictions.jsonl",
               "--config", cfg, "--out", out) == 0
    assert run("report", "--input", out, "--out", out) == 0


def test_full_offline_pipeline_is_reproducible(tmp_path, recording):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 4\nkernel = \"l2\"\nhorizon = 10\nhistory = 10\nstride = 5\n[model]\nepochs = 3\n")
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(recording, a, cfg)
    _pipeline(recording, b, cfg)
    _, events = io.read_jsonl(a / "events.jsonl", "events")
    assert len(events) == 2
    assert len(io.read_scenes(a / "scenes.jsonl")) > 0
    for name in ("tracks.jsonl", "events.jsonl", "scenes.jsonl", "params.bin", "train_report.json",
                 "predictions.jsonl", "collisions.jsonl", "warnings.jsonl", "report.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert "Training: kernel l2" in (a / "report.txt").read_text()


def test_simulate_writes_artifacts(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 2\n[sim]\nwarmup = 20.0\nduration = 40.0\nmethod = \"lcew\"\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path) == 0
    res = io.read_json(tmp_path / "sim_result.json", "sim_result")
    assert res["spawned"] == res["exited"] + res["remaining"]
    head, rows = io.read_jsonl(tmp_path / "sim_events.jsonl", "sim_events")
    assert {r["kind"] for r in rows} <= {"warning", "collision", "exit"}
    summary = json.loads((tmp_path / "sim_summary.json").read_text())
    assert summary["header"]["seed"] == 2


def test_sweep_csv(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 1\n[sim]\nwarmup = 10.0\nduration = 20.0\n"
                   "[sweep]\nrates = [0.0, 0.5]\nmethods = [\"none\"]\nseeds = [1]\n")
    assert run("sweep", "--config", cfg, "--out", tmp_path) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("# {") and lines[1].startswith("penetration,method")
    assert len(lines) == 4


def test_selftest_passes(capsys):
    assert run("selftest") == 0
    assert capsys.readouterr().out.count("PASS") == 3
