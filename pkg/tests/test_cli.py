import json

import pytest

from valuempc.cli import main
from valuempc.report import read_csv


def _train(out, *extra):
    return main(["train", "--env", "lqr1d", "--iters", "3", "--samples", "20", "--workers", "1",
                 "--out", str(out), "--no-figures", *extra])


def test_train_outputs_and_determinism(tmp_path):
    out = tmp_path / "run"
    assert _train(out) == 0
    first = {n: (out / n).read_bytes() for n in ("metrics.csv", "value.json", "manifest.json")}
    assert _train(out) == 0
    for n, blob in first.items():
        assert (out / n).read_bytes() == blob, n
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["config"]["vi"]["iterations"] == 3
    last = (out / "metrics.csv").read_text().splitlines()[-1]
    assert last.startswith("# manifest_sha256=")
    assert len(read_csv(out / "metrics.csv")) == 3
    assert (out / "timing.csv").exists()


def test_train_figure(tmp_path):
    out = tmp_path / "fig"
    assert main(["train", "--env", "lqr1d", "--iters", "2", "--samples", "10", "--workers", "1",
                 "--out", str(out)]) == 0
    assert (out / "training.png").exists()


def test_eval_with_checkpoint(tmp_path):
    out = tmp_path / "run"
    assert _train(out) == 0
    ev = tmp_path / "ev"
    assert main(["eval", "--env", "lqr1d", "--checkpoint", str(out / "value.json"), "--rollouts", "3",
                 "--steps", "5", "--out", str(ev), "--workers", "1"]) == 0
    assert len(read_csv(ev / "summary.csv")) == 1
    assert len(read_csv(ev / "traces.csv")) == 15
    assert "solve_time" not in read_csv(ev / "traces.csv")[0]
    assert (ev / "rollouts.png").exists()


def test_eval_zero_rollouts(tmp_path):
    ev = tmp_path / "ev"
    assert main(["eval", "--env", "point", "--checkpoint", "none", "--rollouts", "0", "--out", str(ev),
                 "--workers", "1"]) == 0
    s = read_csv(ev / "summary.csv")[0]
    assert s["rollouts"] == "0"


def test_eval_fixed_start(tmp_path):
    ev = tmp_path / "ev"
    assert main(["eval", "--env", "pendulum", "--checkpoint", "none", "--start", "0,0", "--steps", "3",
                 "--horizon", "5", "--out", str(ev), "--no-figures", "--workers", "1"]) == 0
    rows = read_csv(ev / "traces.csv")
    assert float(rows[0]["x0"]) == 0.0 and float(rows[0]["x1"]) == 0.0


def test_usage_errors(tmp_path, capsys):
    assert main(["horizon-study", "--env", "lqr1d", "--mode", "train", "--horizons", "",
                 "--out", str(tmp_path / "h"), "--workers", "1"]) == 2
    assert "horizon list is empty" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("vi: {iters: 3}\n")
    assert main(["train", "--env", "lqr1d", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "vi.iters" in capsys.readouterr().err
    assert main(["eval", "--env", "point", "--checkpoint", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "e")]) == 2
    assert main(["eval", "--env", "pendulum", "--checkpoint", "none", "--start", "1,2,3",
                 "--out", str(tmp_path / "e")]) == 2
    assert main(["eval", "--env", "pendulum", "--checkpoint", "none", "--ood",
                 "--out", str(tmp_path / "e")]) == 2


def test_checkpoint_dimension_mismatch_exit(tmp_path):
    out = tmp_path / "run"
    assert _train(out) == 0
    assert main(["eval", "--env", "pendulum", "--checkpoint", str(out / "value.json"),
                 "--out", str(tmp_path / "e")]) == 2


def test_training_abort_exit(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("solver: {max_sqp_iterations: 0}\nvi: {max_drop_fraction: 0.0}\n")
    out = tmp_path / "ab"
    assert main(["train", "--env", "pendulum", "--config", str(cfg), "--iters", "1", "--samples", "10",
                 "--out", str(out), "--workers", "1"]) == 3
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["type"] == "TrainingAborted" and diag["total"] == 10


def test_horizon_study_train(tmp_path):
    out = tmp_path / "hs"
    cfg = tmp_path / "c.yaml"
    cfg.write_text("study: {heldout: 20, gt_horizon: 50}\nvi: {samples: 20}\n")
    assert main(["horizon-study", "--env", "lqr1d", "--mode", "train", "--horizons", "1,3", "--iters", "2",
                 "--config", str(cfg), "--out", str(out), "--workers", "1", "--no-figures"]) == 0
    rows = read_csv(out / "horizon_train.csv")
    assert [(r["horizon"], r["iteration"]) for r in rows] == [("1", "1"), ("1", "2"), ("3", "1"), ("3", "2")]


def test_horizon_study_test(tmp_path):
    out = tmp_path / "hs"
    cfg = tmp_path / "c.yaml"
    cfg.write_text("study: {gt_horizon: 50, rollouts: 4, steps: 10}\nvi: {samples: 20, iterations: 2}\n"
                   "train: {steps: 10}\n")
    assert main(["horizon-study", "--env", "lqr1d", "--mode", "test", "--horizons", "0,1",
                 "--config", str(cfg), "--out", str(out), "--workers", "1"]) == 0
    rows = read_csv(out / "horizon_test.csv")
    assert [r["value"] for r in rows] == ["policy", "vi", "supervised"]
    assert (out / "horizon_test.png").exists()
