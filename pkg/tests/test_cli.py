import filecmp
import itertools
import json
import math

import numpy as np
import pytest
import torch

from bevloc.bev import load_f32
from bevloc.cli import resolve_config, run
from bevloc.diffusion import PoseNormalizer, build_schedule
from bevloc.pipeline import BevLocNet, EvalReport, save_model
from bevloc.plotting import FAILURE_COLOR, SUCCESS_COLOR, success_colors, trajectory_figure
from helpers import tiny_config

SMALL = ["--frames", "12", "--beams", "60", "--seed", "4"]


@pytest.mark.parametrize("flag,file,env", list(itertools.product([None, 11], [None, 22], [None, "33"])))
def test_seed_precedence_matrix(tmp_path, flag, file, env):
    flags = {}
    if file is not None:
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": file}))
        flags["config"] = str(cfg)
    if flag is not None:
        flags["seed"] = flag
    resolved = resolve_config("eval", {"checkpoint": "m", "data": "d", **flags},
                              env={"BEVLOC_SEED": env} if env else {})
    expected = next(v for v in (flag, file, int(env) if env else None, 0) if v is not None)
    assert resolved["seed"] == expected


@pytest.mark.parametrize("flag,file", list(itertools.product([None, 15], [None, 20])))
def test_option_precedence_matrix(tmp_path, flag, file):
    flags = {"checkpoint": "m", "data": "d"}
    if file is not None:
        (tmp_path / "c.json").write_text(json.dumps({"steps": file, "sr-trans": 1.0}))
        flags["config"] = str(tmp_path / "c.json")
    if flag is not None:
        flags["steps"] = flag
    c = resolve_config("eval", flags, env={})
    assert c["steps"] == (flag or file or 10)
    assert c["sr_trans"] == (1.0 if file else 2.0)
    assert c["sr_yaw"] == 5.0


def test_usage_errors(tmp_path, capsys):
    assert run(["eval", "--checkpoint", "a", "--data", "b", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err
    assert run(["no-such-command"]) == 1
    assert run(["eval", "--steps", "ten", "--checkpoint", "a", "--data", "b"]) == 1
    assert run(["eval"]) == 1  # required options
    (tmp_path / "c.json").write_text('{"stepz": 3}')
    assert run(["eval", "--config", str(tmp_path / "c.json"), "--checkpoint", "a", "--data", "b"]) == 1
    assert "stepz" in capsys.readouterr().err
    assert run(["selftest", "--help"]) == 0


def test_runtime_failure_exit_code(tmp_path, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path / "none.bvdl"), "--data", str(tmp_path)]) == 2
    assert "failed" in capsys.readouterr().err


def test_gen_data_is_byte_identical(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path / "a"), *SMALL]) == 0
    assert run(["gen-data", "--out", str(tmp_path / "b"), *SMALL]) == 0
    files = ["world.json", "poses.csv", "meta.json"] + [f"clouds/{i:06d}.bin" for i in range(12)]
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert mismatch == [] and errors == []


def test_gen_world_and_make_bev(tmp_path):
    assert run(["gen-world", "--out", str(tmp_path / "w.json"), "--seed", "7"]) == 0
    assert len(json.loads((tmp_path / "w.json").read_text())["obstacles"]) > 20
    assert run(["gen-data", "--out", str(tmp_path / "d"), *SMALL]) == 0
    assert run(["make-bev", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "bev"),
                "--side", "128", "--png"]) == 0
    img = load_f32(tmp_path / "bev" / "000003.f32", 128)
    assert img.max() == 1.0 and (tmp_path / "bev" / "000003.png").exists()


def test_train_eval_plot(tmp_path):
    data = tmp_path / "d"
    assert run(["gen-data", "--out", str(data), *SMALL]) == 0
    assert run(["train", "--data", str(data), "--out", str(tmp_path / "m.bvdl"), "--epochs", "1",
                "--warmup-epochs", "0", "--batch-size", "4", "--max-steps", "1", "--no-augment"]) == 0
    out = tmp_path / "eval"
    assert run(["eval", "--checkpoint", str(tmp_path / "m.bvdl"), "--data", str(data),
                "--out", str(out), "--steps", "10"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["steps"] == 10 and rep["frames"] == 8 and rep["hz"] > 0
    assert 0 <= rep["sr"] <= 100
    assert run(["plot", "--report", str(out), "--format", "svg"]) == 0
    assert (out / "trajectory.svg").exists() and (out / "yaw_heatmap.svg").exists()


def test_eval_is_deterministic(tmp_path):
    torch.manual_seed(0)
    path = save_model(tmp_path / "m.bvdl", BevLocNet(tiny_config()), PoseNormalizer([-50, -50], [50, 50]),
                      build_schedule(100))
    run(["gen-data", "--out", str(tmp_path / "d"), *SMALL])
    for name in ("a", "b"):
        assert run(["eval", "--checkpoint", str(path), "--data", str(tmp_path / "d"),
                    "--out", str(tmp_path / name)]) == 0
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    a.pop("hz"), b.pop("hz")
    assert a == b
    assert (tmp_path / "a" / "per_frame.csv").read_bytes() == (tmp_path / "b" / "per_frame.csv").read_bytes()


def test_plot_colors_success_red_failure_black():
    truth = np.zeros((2, 3))
    pred = np.array([[1.0, 0.0, math.radians(1.0)], [3.0, 0.0, 0.0]])
    rep = EvalReport.from_predictions([0, 1], truth, pred)
    colors = success_colors(rep)
    assert tuple(colors[0]) == SUCCESS_COLOR == (1.0, 0.0, 0.0, 1.0)
    assert tuple(colors[1]) == FAILURE_COLOR == (0.0, 0.0, 0.0, 1.0)
    fig = trajectory_figure(rep)
    face = fig.axes[0].collections[0].get_facecolors()
    np.testing.assert_array_equal(face, colors)


def test_heatmap_scale_capped_at_five_degrees():
    from bevloc.plotting import yaw_heatmap_figure

    truth = np.zeros((3, 3))
    pred = np.array([[0, 0, math.radians(1)], [0, 0, math.radians(30)], [0, 0, 0]])
    fig = yaw_heatmap_figure(EvalReport.from_predictions([0, 1, 2], truth, pred))
    sc = fig.axes[0].collections[0]
    assert sc.get_clim() == (0.0, 5.0)
    assert sc.get_array().max() == 5.0
