import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from lumen.cli import main


def _png(path, arr):
    Image.fromarray(arr).save(path)
    return str(path)


def test_metrics_identical(tmp_path, capsys):
    p = _png(tmp_path / "a.png", np.full((16, 16, 3), 77, np.uint8))
    assert main(["metrics", "--a", p, "--b", p]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"psnr": "inf", "ssim": 1.0, "mae": 0.0}


def test_flashsim_black_input(tmp_path):
    img = _png(tmp_path / "black.png", np.zeros((16, 16, 3), np.uint8))
    depth = _png(tmp_path / "d.png", np.tile(np.linspace(0, 65535, 16, dtype=np.uint16), (16, 1)))
    out = tmp_path / "f.png"
    assert main(["flashsim", "--input", img, "--depth", depth, "--output", str(out), "--seed", "1"]) == 0
    arr = np.asarray(Image.open(out))
    assert arr.max() == 255 and arr.min() > 0


def test_flashsim_train_noise_is_seeded(tmp_path):
    img = _png(tmp_path / "i.png", np.full((16, 16, 3), 250, np.uint8))
    depth = _png(tmp_path / "d.png", np.tile(np.linspace(0, 65535, 16, dtype=np.uint16), (16, 1)))
    outs = []
    for seed in (1, 1):
        out = tmp_path / f"f{len(outs)}.png"
        main(["flashsim", "--input", img, "--depth", depth, "--output", str(out), "--seed", str(seed),
              "--train-noise"])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_unknown_subcommand_exit_code():
    r = subprocess.run([sys.executable, "-m", "lumen", "frobnicate"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr


def test_unknown_flag_and_missing_file(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["metrics", "--a", "x", "--b", "y", "--nope"])
    assert e.value.code == 2
    r = subprocess.run([sys.executable, "-m", "lumen", "metrics", "--a", str(tmp_path / "no.png"),
                        "--b", str(tmp_path / "no.png")], capture_output=True, text=True)
    assert r.returncode != 0 and "usage" in r.stderr and "no.png" in r.stderr


def test_bad_image_reports_usage(tmp_path, capsys):
    (tmp_path / "bad.png").write_bytes(b"junk")
    assert main(["metrics", "--a", str(tmp_path / "bad.png"), "--b", str(tmp_path / "bad.png")]) == 1
    err = capsys.readouterr().err
    assert "bad.png" in err and "usage" in err


def test_train_enhance_depth_eval(fixture_root, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("crop_size = 32\nbatch_size = 4\nmax_steps = 2\ndepth_base = 4\nmain_base = 4\n")
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(cfg), "--data-root", str(fixture_root), "--out", str(ckpt)]) == 0
    assert ckpt.exists() and (tmp_path / "m.ckpt.losses.jsonl").exists()
    low = str(fixture_root / "test" / "low" / "000.png")
    out = tmp_path / "e.png"
    assert main(["enhance", "--ckpt", str(ckpt), "--input", low, "--output", str(out),
                 "--emit-depth", str(tmp_path / "d.png"), "--emit-flash", str(tmp_path / "f.png")]) == 0
    assert Image.open(out).size == (64, 64)
    assert Image.open(tmp_path / "d.png").mode.startswith("I")
    assert main(["depth", "--ckpt", str(ckpt), "--input", low, "--output", str(tmp_path / "d2.png")]) == 0
    assert (tmp_path / "d.png").read_bytes() == (tmp_path / "d2.png").read_bytes()
    rep = tmp_path / "r.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data-root", str(fixture_root), "--report", str(rep),
                 "--out-dir", str(tmp_path / "ev")]) == 0
    report = json.loads(rep.read_text())
    assert report["checkpoint_step"] == 2 and len(report["images"]) == 4
    capsys.readouterr()
    assert main(["train", "--config", str(cfg), "--data-root", str(fixture_root), "--out",
                 str(tmp_path / "r.ckpt"), "--resume", str(ckpt)]) == 0


def test_train_rejects_bad_config(fixture_root, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate = 1\n")
    assert main(["train", "--config", str(cfg), "--data-root", str(fixture_root), "--out", "x"]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_bench_attention(tmp_path, capsys):
    rep = tmp_path / "b.json"
    assert main(["bench-attention", "--sizes", "16,32", "--report", str(rep)]) == 0
    data = json.loads(rep.read_text())
    assert data["pooled_constant"] and data["full_matches_hw"]
    assert [r["full"]["query_tokens"] for r in data["rows"]] == [[256], [1024]]
