import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from swinmr import smrt
from swinmr.cli import build_parser, main
from swinmr.kspace import UndersamplingMask, synth_phantom
from swinmr.report import abs_difference, heat_rgb, render_triplet, sobel_magnitude

SUBCOMMANDS = ["mask", "phantom", "degrade", "train", "reconstruct", "eval", "bench", "report"]


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero_and_documents_flags(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in out
        if action.option_strings and action.dest != "help":
            assert action.help


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "swinmr", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "reconstruct" in res.stdout


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as info:
        main(["mask", "--ratio", "0.3", "--bogus"])
    assert info.value.code == 2


def test_mask_command(tmp_path, capsys):
    out = tmp_path / "m.smrt"
    assert main(["mask", "--trajectory", "gaussian1d", "--size", "256", "--ratio", "0.3", "--seed", "7",
                 "--out", str(out)]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert json.loads(printed[0])["config"]["ratio"] == 0.3
    meta = json.loads((tmp_path / "m.smrt.json").read_text())
    assert 0.297 <= meta["achieved_ratio"] <= 0.303
    assert smrt.load(out).shape == (256, 256)


def test_mask_ratio_one_is_all_ones(tmp_path):
    assert main(["mask", "--size", "16x24", "--ratio", "1.0", "--out", str(tmp_path / "m.smrt")]) == 0
    assert np.all(smrt.load(tmp_path / "m.smrt") == 1)


def test_mask_ratio_zero_exits_2(tmp_path):
    assert main(["mask", "--ratio", "0", "--out", str(tmp_path / "m.smrt")]) == 2


def test_missing_checkpoint_exits_4(tmp_path, capsys):
    smrt.save(tmp_path / "x.smrt", np.zeros((8, 8), np.float32))
    missing = tmp_path / "nope"
    code = main(["reconstruct", "--checkpoint", str(missing), "--input", str(tmp_path / "x.smrt"),
                 "--out", str(tmp_path / "r.smrt")])
    assert code == 4
    assert str(missing) in capsys.readouterr().err


def test_malformed_run_dir_exits_4(tmp_path):
    assert main(["report", "--run-dir", str(tmp_path)]) == 4


@pytest.fixture(scope="module")
def init_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("cli") / "run"
    code = main(["train", "--out", str(run), "--steps", "0", "--count", "3", "--split", "1,1,1",
                 "--eval-every", "0"])
    assert code == 0
    return run


def test_degrade_then_reconstruct_at_init_is_bit_exact(tmp_path, init_run, capsys):
    img = synth_phantom(32, 32, "random_ellipses", 5).astype(np.float32)
    smrt.save(tmp_path / "gt.smrt", img)
    assert main(["mask", "--size", "32", "--ratio", "0.3", "--out", str(tmp_path / "m.smrt")]) == 0
    assert main(["degrade", "--input", str(tmp_path / "gt.smrt"), "--mask", str(tmp_path / "m.smrt"),
                 "--nl", "0.2", "--seed", "3", "--out", str(tmp_path / "zf.smrt"),
                 "--kspace-out", str(tmp_path / "k.smrt")]) == 0
    assert smrt.load(tmp_path / "k.smrt").dtype == np.complex64
    capsys.readouterr()
    assert main(["reconstruct", "--checkpoint", str(init_run / "checkpoints/step-0"),
                 "--input", str(tmp_path / "zf.smrt"), "--ground-truth", str(tmp_path / "gt.smrt"),
                 "--out", str(tmp_path / "rec.smrt"), "--png", str(tmp_path / "rec.png")]) == 0
    np.testing.assert_array_equal(smrt.load(tmp_path / "rec.smrt"), smrt.load(tmp_path / "zf.smrt"))
    scores = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert scores["psnr_recon"] == scores["psnr_zf"]
    assert Image.open(tmp_path / "rec.png").mode == "L"


def test_reconstruct_degrades_ground_truth_when_mask_given(tmp_path, init_run):
    img = synth_phantom(32, 32).astype(np.float32)
    smrt.save(tmp_path / "gt.smrt", img)
    main(["mask", "--size", "32", "--ratio", "0.3", "--out", str(tmp_path / "m.smrt")])
    assert main(["reconstruct", "--checkpoint", str(init_run / "checkpoints/step-0"),
                 "--input", str(tmp_path / "gt.smrt"), "--mask", str(tmp_path / "m.smrt"),
                 "--out", str(tmp_path / "rec.smrt")]) == 0
    assert main(["degrade", "--input", str(tmp_path / "gt.smrt"), "--mask", str(tmp_path / "m.smrt"),
                 "--out", str(tmp_path / "zf.smrt")]) == 0
    np.testing.assert_array_equal(smrt.load(tmp_path / "rec.smrt"), smrt.load(tmp_path / "zf.smrt"))


def test_eval_and_report(tmp_path, init_run, capsys):
    assert main(["eval", "--checkpoint", str(init_run / "checkpoints/step-0"), "--split", "test",
                 "--out", str(tmp_path / "ev.csv")]) == 0
    summary = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert summary["recon"]["psnr_mean"] == summary["zf"]["psnr_mean"]
    assert (tmp_path / "ev.csv").read_text().startswith("index")
    assert main(["report", "--run-dir", str(init_run), "--out", str(tmp_path / "rep")]) == 0
    pngs = sorted(p.name for p in (tmp_path / "rep").glob("*.png"))
    assert pngs == ["test-000-recon.png", "test-000-zf.png"]
    assert Image.open(tmp_path / "rep" / pngs[0]).size == (96, 32)


def test_bench_command(tmp_path, capsys):
    assert main(["bench", "--sizes", "8,16", "--channels", "8", "--window", "4", "--repeats", "1",
                 "--out", str(tmp_path / "b.csv")]) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()[1:]]
    assert [r["H"] for r in rows] == [8, 16]
    assert all(r["wmsa_rel_err"] == 0 for r in rows)


def test_threads_env_var():
    env = {"SWINMR_THREADS": "1", "PATH": ""}
    code = "import os, swinmr.cli; print(os.environ['OMP_NUM_THREADS'])"
    res = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert res.stdout.strip() == "1"


# -- report helpers ---------------------------------------------------------------


def test_sobel_constant_is_zero():
    assert not np.any(sobel_magnitude(np.full((9, 9), 3.0)))


def test_sobel_step_edge_peaks_at_step():
    img = np.zeros((10, 12))
    img[:, 6:] = 1.0
    mag = sobel_magnitude(img)
    col = np.argmax(mag.sum(axis=0))
    assert col in (5, 6)
    np.testing.assert_allclose(mag[:, 5], 4.0)
    np.testing.assert_allclose(mag[:, 6], 4.0)
    assert not np.any(mag[:, :5]) and not np.any(mag[:, 7:])


def test_identical_images_give_black_heatmap(tmp_path):
    x = synth_phantom(32, 32)
    assert not np.any(abs_difference(x, x))
    assert not np.any(heat_rgb(abs_difference(x, x)))
    path = render_triplet(x, x, tmp_path / "t.png")
    arr = np.asarray(Image.open(path))
    assert arr.shape == (32, 96, 3)
    assert not np.any(arr[:, 64:])


def test_difference_gain_is_ten():
    np.testing.assert_allclose(abs_difference(np.zeros(3), np.array([0.1, -0.2, 0.0])), [1.0, 2.0, 0.0])
