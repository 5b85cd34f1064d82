import hashlib
import json
import subprocess
import sys
from urllib.parse import urlsplit

import pytest
from fastapi.testclient import TestClient

from posefit import cli
from posefit.evaluation import evaluate
from posefit.seqio import load_positions
from posefit.service.app import create_app
from posefit.skeleton import EVAL_JOINTS, default_skeleton


def run(argv, capsys):
    try:
        code = cli.main(argv)
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    lines = [ln for ln in err.splitlines() if ln.strip()]
    body = json.loads(lines[-1])
    assert set(body) == {"error", "message", "exit_code"}
    return body


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "seq"
    assert cli.main(["generate", "--out", str(out), "--seed", "4", "--frames", "16"]) == 0
    return out


def test_generate_is_byte_identical(seq, tmp_path, capsys):
    code, out, _ = run(["generate", "--out", str(tmp_path / "again"), "--seed", "4", "--frames", "16"], capsys)
    assert code == 0 and json.loads(out)["frames"] == 16
    assert tree_hash(tmp_path / "again") == tree_hash(seq)
    run(["generate", "--out", str(tmp_path / "other"), "--seed", "5", "--frames", "16"], capsys)
    assert tree_hash(tmp_path / "other") != tree_hash(seq)


def test_generate_flags_reach_meta(tmp_path, capsys):
    code, _, _ = run(["generate", "--out", str(tmp_path / "s"), "--frames", "3", "--fov-deg", "60"], capsys)
    assert code == 0
    meta = json.loads((tmp_path / "s" / "meta.json").read_text())
    assert meta["frames"] == 3 and meta["camera"]["image_size"] == [1280, 720]
    assert meta["camera"]["focal_px"] == pytest.approx(360.0 / 0.5773502691896257)


def test_zero_frames_is_config_error(tmp_path, capsys):
    code, _, err = run(["generate", "--out", str(tmp_path / "z"), "--frames", "0"], capsys)
    assert code == 2 and error_line(err)["error"] == "config"


def test_motion_and_noise_files(tmp_path, capsys):
    (tmp_path / "motion.yaml").write_text("frames: 4\njoints:\n  l_elbow:\n    amplitude: [0, 0, 0.5]\n"
                                          "    frequency: [0, 0, 1.0]\nroot:\n  start: [0, 0, 3500]\n")
    (tmp_path / "noise.yaml").write_text("kp_jitter_sigma_px: 2.0\nseed: 9\n")
    code, _, err = run(["generate", "--out", str(tmp_path / "s"), "--motion", str(tmp_path / "motion.yaml"),
                        "--noise", str(tmp_path / "noise.yaml")], capsys)
    assert code == 0, err
    meta = json.loads((tmp_path / "s" / "meta.json").read_text())
    assert meta["noise"]["kp_jitter_sigma_px"] == 2.0 and meta["noise"]["seed"] == 9
    assert meta["motion"]["root"]["start"] == [0, 0, 3500]


def test_track_eval_round_trip(seq, tmp_path, capsys):
    code, out, err = run(["track", str(seq), "--out", str(tmp_path / "t")], capsys)
    assert code == 0, err
    body = json.loads(out)
    assert body["frames"] == 16 and body["mpjpe_mm"] < 10.0
    for name in ("poses.jsonl", "diagnostics.jsonl", "report.json"):
        assert (tmp_path / "t" / name).exists()

    code, out, _ = run(["eval", str(tmp_path / "t"), str(seq), "--out", str(tmp_path / "r.json"),
                        "--csv", str(tmp_path / "e.csv")], capsys)
    assert code == 0
    report = json.loads(out)
    # matches the evaluation module called directly
    sk = default_skeleton()
    direct = evaluate(load_positions(tmp_path / "t"), load_positions(seq), sk.joint_names, sk.indices(EVAL_JOINTS))
    assert report == json.loads(direct.to_json())
    assert json.loads((tmp_path / "r.json").read_text()) == report
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 1 + 16 * 14


def test_track_is_deterministic(seq, tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["track", str(seq), "--out", str(tmp_path / name)], capsys)[0] == 0
    assert (tmp_path / "a" / "poses.jsonl").read_bytes() == (tmp_path / "b" / "poses.jsonl").read_bytes()


def test_ablation_flags_recorded(seq, tmp_path, capsys):
    code, _, _ = run(["track", str(seq), "--out", str(tmp_path / "t"), "--no-ik", "--no-filter",
                      "--gt-2d-lookup"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "t" / "report.json").read_text())
    assert rep["flags"] == {"no_ik": True, "no_filter": True, "gt_2d_lookup": True}
    poses = [json.loads(x) for x in (tmp_path / "t" / "poses.jsonl").read_text().splitlines()]
    # no filter: output equals the fit
    assert all(p["positions"] == p["fitted_positions"] for p in poses)


def test_self_eval_is_perfect(seq, capsys):
    code, out, _ = run(["eval", str(seq), str(seq), "--joints", "all"], capsys)
    body = json.loads(out)
    assert code == 0 and body["mpjpe_mm"] == 0.0 and body["auc"] == 1.0 and len(body["joints"]) == 21


def test_missing_sequence_is_data_error(tmp_path, capsys):
    code, _, err = run(["track", str(tmp_path / "nope")], capsys)
    assert code == 3 and error_line(err)["exit_code"] == 3


def test_eval_mismatch_is_data_error(seq, tmp_path, capsys):
    (tmp_path / "p.jsonl").write_text(json.dumps({"positions": [[0, 0, 0]] * 21}) + "\n")
    code, _, err = run(["eval", str(tmp_path / "p.jsonl"), str(seq)], capsys)
    assert code == 3 and error_line(err)["error"] == "data"


def test_bad_arguments_are_config_errors(tmp_path, capsys):
    code, _, err = run(["generate"], capsys)
    assert code == 2 and error_line(err)["error"] == "config"
    code, _, err = run(["frobnicate"], capsys)
    assert code == 2
    code, _, err = run(["generate", "--out", str(tmp_path / "x"), "--set", "fit.w_proj"], capsys)
    assert code == 2 and error_line(err)["exit_code"] == 2
    code, _, err = run(["track", str(tmp_path), "--config", str(tmp_path / "missing.yaml")], capsys)
    assert code == 2


def test_flagged_frames_exit_4(seq, tmp_path, capsys):
    # start 1 mm from the camera with a single iteration: joints stay behind it
    code, out, err = run(["track", str(seq), "--out", str(tmp_path / "t"), "--set", "fit.init_depth_mm=1",
                          "--set", "fit.max_iters=1"], capsys)
    assert code == 4
    body = error_line(err)
    assert body["error"] == "solver_flagged" and body["exit_code"] == 4
    assert json.loads(out)["flagged_frames"] >= 1


def test_bench_report(seq, tmp_path, capsys):
    code, out, _ = run(["bench", str(seq), "--jacobian", "analytic", "--out", str(tmp_path / "b.json")], capsys)
    assert code == 0
    body = json.loads(out)
    run_ = body["runs"][0]
    assert run_["jacobian"] == "analytic" and run_["frames"] == 16
    assert {"fit", "filter", "decode", "total"} <= set(run_["stages"])
    assert all(s["p50_ms"] > 0 and s["p95_ms"] >= s["p50_ms"] for s in run_["stages"].values())
    assert json.loads((tmp_path / "b.json").read_text()) == body


def test_bench_respects_iteration_cap(seq, capsys):
    capped = json.loads(run(["bench", str(seq), "--jacobian", "analytic", "--set", "fit.max_iters=1"], capsys)[1])
    full = json.loads(run(["bench", str(seq), "--jacobian", "analytic"], capsys)[1])
    assert capped["runs"][0]["mean_iterations"] <= 1.0 < full["runs"][0]["mean_iterations"]


def test_remote_mode_matches_in_process(seq, tmp_path, capsys, monkeypatch):
    import httpx

    client = TestClient(create_app())

    def post(url, json, timeout):
        return client.post(urlsplit(url).path, json=json)

    monkeypatch.setattr(httpx, "post", post)
    code, out, _ = run(["--server", "http://svc", "eval", str(seq), str(seq)], capsys)
    assert code == 0 and json.loads(out)["mpjpe_mm"] == 0.0
    code, _, err = run(["--server", "http://svc", "track", str(tmp_path / "none")], capsys)
    assert code == 3 and error_line(err)["error"] == "data"


def test_console_script_failure_line(tmp_path):
    p = subprocess.run([sys.executable, "-m", "posefit.cli", "eval", str(tmp_path / "a"), str(tmp_path / "b")],
                       capture_output=True, text=True)
    assert p.returncode == 3
    assert error_line(p.stderr)["error"] == "data"
