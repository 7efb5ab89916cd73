import json
import subprocess
import sys

import jsonschema
import pytest

from aviate.cli import EXIT_INPUT, EXIT_NO_ACTORS, EXIT_OK, latency_sweep, main, summary_schema, validate_summary


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "aviate", *args], capture_output=True, text=True, timeout=600)


def test_run_corridor_writes_valid_summary(tmp_path):
    proc = run_cli("run", "--scene", "corridor", "--out", str(tmp_path))
    assert proc.returncode == EXIT_OK, proc.stderr
    summary = json.loads((tmp_path / "summary.json").read_text())
    validate_summary(summary)
    assert summary["collisions"] == 0 and summary["reached_goal"] and not summary["baseline"]
    assert summary["latency"]["plan"]["mean_us"] > 0
    for name in ("truth.csv", "plans.csv", "tracks.csv"):
        assert (tmp_path / name).exists()
    printed = json.loads(proc.stdout)
    assert printed["fingerprint"] == summary["fingerprint"]


def test_replay_is_identical(tmp_path):
    assert main(["run", "--scene", "crossing", "--duration", "2", "--out", str(tmp_path)]) == EXIT_OK
    assert main(["replay", str(tmp_path / "summary.json")]) == EXIT_OK


def test_replay_detects_tampering(tmp_path, capsys):
    main(["run", "--scene", "corridor", "--duration", "1", "--out", str(tmp_path)])
    path = tmp_path / "summary.json"
    summary = json.loads(path.read_text())
    summary["fingerprint"] = "0" * 64
    path.write_text(json.dumps(summary))
    assert main(["replay", str(path)]) == 1


def test_malformed_scene_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"duration": 1, "start": [0, 0')
    proc = run_cli("run", "--scene", str(bad))
    assert proc.returncode == EXIT_INPUT
    err = json.loads(proc.stderr.strip().splitlines()[-1])
    assert err["error"] == "SceneError" and "line" in err["message"]


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["run", "--scene", "corridor", "--config", str(tmp_path / "none.json")]) == EXIT_INPUT
    assert json.loads(capsys.readouterr().err)["error"]


def test_static_only_marks_baseline(tmp_path, capsys):
    assert main(["run", "--scene", "crossing", "--static-only", "--duration", "1.5", "--out", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["baseline"] is True and summary["manifest"]["static_only"] is True


def test_estimate_bench_without_actors(capsys):
    assert main(["estimate-bench", "--scene", "corridor"]) == EXIT_NO_ACTORS
    assert json.loads(capsys.readouterr().err)["error"] == "no-actors"


def test_estimate_bench_report(tmp_path):
    assert main(["estimate-bench", "--scene", "ball_clean", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "estimation.json").read_text())
    ball = report["actors"]["ball"]
    assert ball["samples"] > 0 and ball["raw_samples"] > 0
    assert ball["position_rmse"] <= 0.15
    # the scene disables the overlay; the flag forces it back on
    assert report["overlay"] is False and set(report["pooled"]) == set(ball)
    forced = tmp_path / "forced"
    assert main(["estimate-bench", "--scene", "ball_clean", "--overlay", "on", "--duration", "1",
                 "--out", str(forced)]) == EXIT_OK
    assert json.loads((forced / "estimation.json").read_text())["overlay"] is True


def test_schema_rejects_bad_summary():
    with pytest.raises(jsonschema.ValidationError):
        validate_summary({"scene": "x"})
    assert summary_schema()["type"] == "object"


def test_bench_latency_monotone(tmp_path, capsys):
    assert main(["bench-latency", "--iters", "5", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "latency.csv").read_text().splitlines()
    assert lines[0].startswith("points,tracks,candidates")
    assert len(lines) == 5


def test_latency_sweep_empty_world():
    row = latency_sweep([0], iters=5, n_tracks=0)[0]
    assert row["total_mean_us"] > 0 and row["static_mean_us"] == pytest.approx(0.0, abs=50)
