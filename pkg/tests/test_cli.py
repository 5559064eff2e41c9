import json
import os
import subprocess
import sys

import numpy as np
import pytest

from sitsforecast import cli
from sitsforecast.core import tape
from sitsforecast.sits_io import read_ppm, write_pbm

TINY_CFG = """\
image_size = 8
unet_channels = 4,8
temb_dim = 8
d_tok = 8
pte_hidden = 8
d_cond = 8
fusion_dim = 8
diffusion_steps = 5
batch_size = 2
steps_stage0 = 2
steps_stage1 = 2
steps_stage2 = 2
steps_stage3 = 2
"""


@pytest.fixture()
def tiny(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data = tmp_path / "data"
    assert cli.main(["synth", "--scenario", "growing_square", "--n", "2", "--size", "8",
                     "--seed", "1", "--out", str(data)]) == 0
    return tmp_path, str(cfg), str(data)


def _train_all(tmp_path, cfg, data):
    prev = None
    for k in range(4):
        out = str(tmp_path / f"s{k}.ckpt")
        argv = ["train", "--stage", str(k), "--data", data, "--config", cfg, "--checkpoint-out", out,
                "--report", str(tmp_path / f"s{k}.json")]
        if prev:
            argv += ["--checkpoint-in", prev]
        assert cli.main(argv) == 0
        prev = out
    return prev


def test_usage_errors_exit_2(capsys):
    assert cli.main([]) == 2
    assert cli.main(["synth", "--scenario", "bogus", "--out", "x"]) == 2
    assert cli.main(["train", "--stage", "7", "--data", "d", "--checkpoint-out", "c"]) == 2
    capsys.readouterr()


def test_synth_writes_manifests(tiny):
    _, _, data = tiny
    names = sorted(os.listdir(data))
    assert "growing_square_0000.json" in names and "growing_square_0001_3.ppm" in names


def test_stage_gates_exit_1(tiny, capsys):
    tmp_path, cfg, data = tiny
    assert cli.main(["train", "--stage", "1", "--data", data, "--config", cfg,
                     "--checkpoint-out", str(tmp_path / "x.ckpt")]) == 1
    assert "stage 1 requires --checkpoint-in" in capsys.readouterr().err
    assert cli.main(["train", "--stage", "1", "--data", data, "--config", cfg,
                     "--checkpoint-in", str(tmp_path / "missing.ckpt"),
                     "--checkpoint-out", str(tmp_path / "x.ckpt")]) == 1
    assert cli.main(["train", "--stage", "0", "--data", data, "--config", str(tmp_path / "nope.cfg"),
                     "--checkpoint-out", str(tmp_path / "x.ckpt")]) == 1
    assert cli.main(["train", "--stage", "0", "--data", data, "--config", cfg,
                     "--checkpoint-out", str(tmp_path / "s0.ckpt")]) == 0
    # stage 2 straight after stage 0 skips the structural stage
    assert cli.main(["train", "--stage", "2", "--data", data, "--config", cfg,
                     "--checkpoint-in", str(tmp_path / "s0.ckpt"),
                     "--checkpoint-out", str(tmp_path / "x.ckpt")]) == 1
    assert cli.main(["forecast", "--data", data, "--config", cfg, "--checkpoint", str(tmp_path / "s0.ckpt"),
                     "--out", str(tmp_path / "f")]) == 1


def test_pipeline_and_reports(tiny, capsys):
    tmp_path, cfg, data = tiny
    ckpt = _train_all(tmp_path, cfg, data)
    rep = json.loads((tmp_path / "s1.json").read_text())
    assert list(rep) == ["stage", "steps", "loss", "seed", "config_hash", "tool_version"]
    assert rep["stage"] == 1 and len(rep["loss"]) == 2
    fdir = tmp_path / "fc"
    assert cli.main(["forecast", "--data", data, "--config", cfg, "--checkpoint", ckpt,
                     "--out", str(fdir)]) == 0
    assert read_ppm(fdir / "growing_square_0000.ppm").shape == (8, 8, 3)
    assert json.loads((fdir / "forecasts.json").read_text())["mode"] == "full"
    report = tmp_path / "eval.json"
    assert cli.main(["evaluate", "--data", data, "--forecasts", str(fdir), "--config", cfg,
                     "--report", str(report), "--threads", "2"]) == 0
    doc = json.loads(report.read_text())
    assert list(doc) == ["config", "config_hash", "seed", "tool_version", "sequences", "aggregate"]
    assert [r["id"] for r in doc["sequences"]] == ["growing_square_0000", "growing_square_0001"]
    assert all(0.0 <= r["tcs"] <= 1.0 for r in doc["sequences"])
    # 8x8 frames are too small for the 11x11 SSIM window
    assert doc["sequences"][0]["ssim"] is None and doc["aggregate"]["mean_ssim"] is None
    capsys.readouterr()
    assert cli.main(["evaluate", "--data", data, "--forecasts", str(fdir), "--config", cfg]) == 0
    assert json.loads(capsys.readouterr().out)["sequences"] == doc["sequences"]

    os.remove(fdir / "growing_square_0001.ppm")
    assert cli.main(["evaluate", "--data", data, "--forecasts", str(fdir), "--config", cfg]) == 1


def test_evaluate_masks(tmp_path, capsys):
    hist, pred = tmp_path / "h", tmp_path / "p"
    hist.mkdir()
    pred.mkdir()
    a = np.zeros((10, 10), dtype=bool)
    a[2:4, 2:4] = True
    write_pbm(hist / "m1.pbm", a)
    write_pbm(pred / "m1.pbm", a)
    assert cli.main(["evaluate", "--masks-hist", str(hist), "--masks-pred", str(pred)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["sequences"][0]["tcs"] == 1.0 and doc["config"]["detector"] == "external_mask_file"
    write_pbm(pred / "m2.pbm", a)
    assert cli.main(["evaluate", "--masks-hist", str(hist), "--masks-pred", str(pred)]) == 1
    assert cli.main(["evaluate", "--masks-hist", str(hist)]) == 1


def test_gradcheck_detects_corrupted_backward(monkeypatch, capsys):
    assert cli.main(["gradcheck", "--module", "numeric_core", "--configs", "2"]) == 0
    assert "all components pass" in capsys.readouterr().out
    monkeypatch.setattr(tape, "CORRUPT_OPS", {"conv3d"})
    assert cli.main(["gradcheck", "--module", "numeric_core", "--configs", "2"]) == 1
    out = capsys.readouterr().out
    assert "gradient check FAILED" in out and "FAIL" in out.splitlines()[2]


def test_console_script_environment_hook():
    env = dict(os.environ, SITSFORECAST_CORRUPT_BACKWARD="linear")
    proc = subprocess.run([sys.executable, "-m", "sitsforecast.cli", "gradcheck", "--module", "tam",
                           "--configs", "1"], env=env, capture_output=True, text=True)
    assert proc.returncode == 1 and "FAILED" in proc.stdout
