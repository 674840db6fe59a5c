"""Command-line behavior: pipelines, exit codes, thread pinning."""

from __future__ import annotations

import json
import os
import subprocess
import sys

import numpy as np
import pytest

import gapscan.cli as cli
import gapscan.train as tr


def write_config(path, **train_overrides):
    cfg = {
        "model": {"channels": 2, "state_size": 2, "layers": 1, "patch": 4},
        "train": {"epochs": 2, "batch_size": 8, "learning_rates": [0.01],
                  "seed": 1, **train_overrides},
    }
    path.write_text(json.dumps(cfg))
    return path


def generate(tmp_path, n=16, name="cohort"):
    out = tmp_path / name
    rc = cli.main(["generate", "--out", str(out), "--patients", str(n),
                   "--image-size", "8", "--views", "2", "--max-visits", "4",
                   "--seed", "7", "--folds", "3", "--blob-sigma", "1.5"])
    assert rc == 0
    return out


def test_full_pipeline(tmp_path, capsys):
    data = generate(tmp_path)
    cfg = write_config(tmp_path / "cfg.json")
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(run),
                     "--config", str(cfg)]) == 0
    for name in ("metrics.json", "history.csv", "loss_curve.png",
                 "checkpoint/manifest.json"):
        assert (run / name).exists(), name
    metrics = json.loads((run / "metrics.json").read_text())
    assert len(metrics["history"]) == 2
    assert metrics["learning_rate"] == 0.01

    ev = tmp_path / "ev"
    assert cli.main(["eval", "--data", str(data), "--checkpoint",
                     str(run / "checkpoint"), "--out", str(ev)]) == 0
    assert (ev / "metrics.json").exists()
    assert (ev / "metrics.csv").exists()
    out = capsys.readouterr().out
    assert "c-index" in out


def test_train_resume_extends_history(tmp_path):
    data = generate(tmp_path)
    cfg = write_config(tmp_path / "cfg.json", epochs=1)
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(run),
                     "--config", str(cfg)]) == 0
    _, _, tcfg, nxt, hist = tr.load_checkpoint(run / "checkpoint")
    assert nxt == 1 and len(hist) == 1
    # finished run: resume is a no-op but still succeeds
    assert cli.main(["train", "--data", str(data), "--out", str(run),
                     "--resume"]) == 0


def test_resume_rejects_overrides(tmp_path):
    data = generate(tmp_path)
    cfg = write_config(tmp_path / "cfg.json", epochs=1)
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(run),
                     "--config", str(cfg)]) == 0
    rc = cli.main(["train", "--data", str(data), "--out", str(run),
                   "--resume", "--epochs", "5"])
    assert rc == 2


def test_lr_grid_records_choice(tmp_path):
    data = generate(tmp_path)
    cfg = write_config(tmp_path / "cfg.json", epochs=1,
                       learning_rates=[0.01, 0.001])
    run = tmp_path / "grid"
    assert cli.main(["train", "--data", str(data), "--out", str(run),
                     "--config", str(cfg)]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["learning_rate"] in (0.01, 0.001)


def test_bad_config_file_exits_2(tmp_path):
    data = generate(tmp_path)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--data", str(data), "--out",
                     str(tmp_path / "r"), "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"model": {"bogus_knob": 3}}))
    assert cli.main(["train", "--data", str(data), "--out",
                     str(tmp_path / "r"), "--config", str(bad)]) == 2
    assert cli.main(["train", "--data", str(data), "--out",
                     str(tmp_path / "r"), "--config",
                     str(tmp_path / "missing.json")]) == 2


def test_bad_fold_exits_2(tmp_path):
    data = generate(tmp_path)
    cfg = write_config(tmp_path / "cfg.json", epochs=1)
    assert cli.main(["train", "--data", str(data), "--out",
                     str(tmp_path / "r"), "--config", str(cfg),
                     "--val-fold", "9"]) == 2


def test_missing_data_exits_1(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "r")]) == 1
    assert cli.main(["eval", "--data", str(tmp_path / "nope"),
                     "--checkpoint", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "r")]) == 1


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_profile_command(tmp_path, capsys):
    out = tmp_path / "prof"
    rc = cli.main(["profile", "--out", str(out), "--lengths", "64,128",
                   "--repeats", "2", "--bench-channels", "4",
                   "--bench-state", "2"])
    assert rc == 0
    assert (out / "profile.json").exists()
    assert (out / "profile.csv").exists()
    assert (out / "scaling.png").exists()
    assert "parameter census" in capsys.readouterr().out
    assert cli.main(["profile", "--skip-bench"]) == 0
    assert cli.main(["profile", "--lengths", "12,,x"]) == 2


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    assert "gradient check passed" in capsys.readouterr().out


def test_threads_flag_sets_env_before_numpy():
    code = (
        "import sys\n"
        "import gapscan.cli as cli\n"
        "assert 'numpy' not in sys.modules, 'numpy imported too early'\n"
        "import os\n"
        "cli._set_threads(3)\n"
        "assert os.environ['OMP_NUM_THREADS'] == '3'\n"
        "assert os.environ['OPENBLAS_NUM_THREADS'] == '3'\n"
        "print('ok')\n"
    )
    proc = subprocess.run([sys.executable, "-c", code],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "ok" in proc.stdout


def test_generate_is_deterministic(tmp_path):
    a = generate(tmp_path, name="a")
    b = generate(tmp_path, name="b")
    assert (a / "manifest.json").read_bytes() == \
           (b / "manifest.json").read_bytes()
