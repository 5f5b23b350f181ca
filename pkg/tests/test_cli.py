import csv
import filecmp

import numpy as np
import pytest

from fgdfpn import checkpoint, cli
from fgdfpn.metrics import psnr, ssim
from fgdfpn.model import FGDFPN
from fgdfpn.video_io import encode_y4m, load_pgm, save_pgm

TINY = """\
# small model for command-line tests
model.base_channels = 4
model.blocks = 1
train.batch_size = 2
train.crop = 16
train.lr0 = 0.001
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture
def data(tmp_path):
    d = tmp_path / "clips"
    assert run("synth-data", "--out", d, "--clips", 3, "--seed", 4, "--size", 16) == 0
    return d


def _trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    same = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not same[1] and not same[2] and all(_trees_equal(a / s, b / s) for s in cmp.common_dirs)


# -- synth-data ----------------------------------------------------------------------


def test_synth_data_deterministic(tmp_path):
    for name in "ab":
        assert run("synth-data", "--out", tmp_path / name, "--clips", 2, "--seed", 9, "--size", 16,
                   "--motion", "affine") == 0
    assert _trees_equal(tmp_path / "a", tmp_path / "b")
    assert len(list((tmp_path / "a" / "clip_00001").glob("*.pgm"))) == 5


def test_synth_data_zero_clips(tmp_path):
    assert run("synth-data", "--out", tmp_path / "z", "--clips", 0) == 0
    assert (tmp_path / "z" / "manifest.csv").read_text().splitlines() == ["clip,motion,dx,dy,speed,angle,zoom"]


def test_synth_data_speed_bound(tmp_path):
    assert run("synth-data", "--out", tmp_path / "s", "--clips", 25, "--max-speed", 3, "--size", 12) == 0
    with open(tmp_path / "s" / "manifest.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 25 and all(float(r["speed"]) <= 3.0 for r in rows)
    assert run("synth-data", "--out", tmp_path / "s", "--clips", 1, "--max-speed", 9) == 1


def test_synth_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("synth-data", "--out", blocker / "sub", "--clips", 1, "--size", 12) == 2


# -- train -----------------------------------------------------------------------------


def test_train_zero_iters_is_initialization(tmp_path, tiny_cfg, data):
    out = tmp_path / "m.ckpt"
    assert run("train", "--config", tiny_cfg, "--data", data, "--out", out, "--iters", 0, "--seed", 5) == 0
    model, _ = checkpoint.load_model(out)
    from fgdfpn.config import load
    fresh = FGDFPN(load(tiny_cfg).model, seed=5)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(model.parameters(), fresh.parameters()))


def test_default_config_echoes_lr0(tmp_path, data):
    out = tmp_path / "m.ckpt"
    assert run("train", "--data", data, "--out", out, "--iters", 0) == 0
    log = (tmp_path / "m.log.csv").read_text().splitlines()
    assert "# train.lr0 = 0.0001" in log
    assert log[-1] == "iter,lr,loss,seconds"


def test_config_errors_carry_line_numbers(tmp_path, data, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.base_channels = 4\ntrain.lr = 1\n")
    assert run("train", "--config", bad, "--data", data, "--out", tmp_path / "m.ckpt") == 1
    assert "bad.cfg:2" in capsys.readouterr().err
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "m.ckpt") == 1


def test_flag_overrides_file(tmp_path, tiny_cfg, data):
    out = tmp_path / "m.ckpt"
    assert run("train", "--config", tiny_cfg, "--set", "train.lr0 = 0.5", "--data", data, "--out", out,
               "--iters", 0) == 0
    assert "# train.lr0 = 0.5" in (tmp_path / "m.log.csv").read_text().splitlines()


def test_split_resume_matches_straight_run(tmp_path, tiny_cfg, data):
    straight, first, resumed = tmp_path / "s.ckpt", tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    common = ("--config", tiny_cfg, "--data", data, "--seed", 3)
    assert run("train", *common, "--out", straight, "--iters", 4) == 0
    assert run("train", *common, "--out", first, "--iters", 2) == 0
    assert run("train", *common, "--out", resumed, "--iters", 4, "--resume", first, "--log", tmp_path / "a.log.csv") == 0
    assert straight.read_bytes() == resumed.read_bytes()
    log = [l for l in (tmp_path / "a.log.csv").read_text().splitlines() if not l.startswith("#")]
    assert [l.split(",")[0] for l in log] == ["iter", "0", "1", "2", "3"]


def test_resume_rejects_other_model(tmp_path, tiny_cfg, data):
    first = tmp_path / "a.ckpt"
    assert run("train", "--config", tiny_cfg, "--data", data, "--out", first, "--iters", 0) == 0
    assert run("train", "--data", data, "--out", tmp_path / "b.ckpt", "--resume", first) == 1


# -- predict / eval ----------------------------------------------------------------------


@pytest.fixture
def ckpt(tmp_path, tiny_cfg, data):
    out = tmp_path / "m.ckpt"
    assert run("train", "--config", tiny_cfg, "--data", data, "--out", out, "--iters", 1) == 0
    return out


@pytest.fixture
def seq_dir(tmp_path, rng):
    d = tmp_path / "seq"
    d.mkdir()
    frames = rng.integers(0, 256, (7, 14, 18), dtype=np.uint8)
    for i, f in enumerate(frames):
        save_pgm(f, d / f"{i:03d}.pgm")
    return d, frames


def test_predict_output_dims_and_error_map(tmp_path, ckpt, seq_dir):
    d, frames = seq_dir
    out, emap = tmp_path / "p.pgm", tmp_path / "e.pgm"
    assert run("predict", "--ckpt", ckpt, "--input", d, "--t", 5, "--out", out, "--error-map", emap) == 0
    assert load_pgm(out).shape == frames.shape[1:]
    assert load_pgm(emap).max() == 255
    assert run("predict", "--ckpt", ckpt, "--input", d, "--t", 3, "--out", out) == 1
    assert run("predict", "--ckpt", ckpt, "--input", d, "--t", 7, "--out", out) == 1


def test_predict_missing_checkpoint(tmp_path, seq_dir, capsys):
    assert run("predict", "--ckpt", tmp_path / "nope.ckpt", "--input", seq_dir[0], "--t", 4,
               "--out", tmp_path / "p.pgm") == 2
    assert "does not exist" in capsys.readouterr().err


def test_predict_corrupt_checkpoint(tmp_path, seq_dir):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"FGDFjunk")
    assert run("predict", "--ckpt", bad, "--input", seq_dir[0], "--t", 4, "--out", tmp_path / "p.pgm") == 2


def test_eval_report_rows_and_baseline(tmp_path, ckpt, seq_dir):
    _, frames = seq_dir
    y4m = tmp_path / "s.y4m"
    y4m.write_bytes(encode_y4m(frames, "420jpeg"))
    report = tmp_path / "r.csv"
    assert run("eval", "--ckpt", ckpt, "--input", y4m, "--report", report, "--baseline", "copy-last") == 0
    lines = report.read_text().splitlines()
    rows = [l.split(",") for l in lines[1:] if not l.startswith("#")]
    assert len(rows) == 2 * (len(frames) - 4)
    model_rows = [r for r in rows if not r[0].startswith("copy-last")]
    notes = dict(l[2:].split(" = ") for l in lines if l.startswith("# "))
    assert float(notes["mean_psnr_db"]) == pytest.approx(np.mean([float(r[1]) for r in model_rows]), abs=1e-12)
    assert float(notes["mean_ssim"]) == pytest.approx(np.mean([float(r[2]) for r in model_rows]), abs=1e-12)
    for r in rows[len(model_rows):]:
        t = int(r[0].split(":")[1])
        assert abs(float(r[1]) - psnr(frames[t - 1], frames[t])) < 1e-9
        assert abs(float(r[2]) - ssim(frames[t - 1], frames[t])) < 1e-9


def test_eval_too_few_frames(tmp_path, ckpt, rng):
    y4m = tmp_path / "s.y4m"
    y4m.write_bytes(encode_y4m(rng.integers(0, 256, (4, 12, 12), dtype=np.uint8)))
    assert run("eval", "--ckpt", ckpt, "--input", y4m, "--report", tmp_path / "r.csv") == 2


# -- gradcheck -----------------------------------------------------------------------------


def test_gradcheck_single_op(capsys):
    assert run("gradcheck", "--op", "deform_conv2d") == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 1 and out[0].startswith("deform_conv2d") and out[0].endswith("ok")


def test_gradcheck_unknown_op():
    assert run("gradcheck", "--op", "nope") == 1


def test_gradcheck_reports_broken_backward(monkeypatch, capsys):
    from fgdfpn import kernels

    original = kernels._conv2d_backward

    def skewed(*args, **kw):
        gx, gw, gb = original(*args, **kw)
        return gx, gw * 1.01, gb

    monkeypatch.setattr(kernels, "_conv2d_backward", skewed)
    assert run("gradcheck", "--op", "conv2d") == 2
    cap = capsys.readouterr()
    assert "FAIL" in cap.out and "conv2d" in cap.err


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 1
