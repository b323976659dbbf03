"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""

import json
import math
import time

import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import oracles
from conftest import record_acceptance
from lumen import imaging
from lumen.bench import bench_attention
from lumen.checkpoint import load_checkpoint, save_checkpoint
from lumen.checks import TOL, run_all
from lumen.config import TrainConfig
from lumen.data import load_dataset
from lumen.diffcore import RngStream
from lumen.enhancer import LumenModel, ModelConfig
from lumen.flash import ClusterCenters, FlashParams, flash_intensity, simulate_flash, soft_assign
from lumen.optim import cosine_lr
from lumen.training import evaluate, load_model, train, write_report
from overfit_run import run_overfit

PROPERTY_CASES = 10_000


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    results = run_all(TOL)
    seconds = time.perf_counter() - t0
    failed = [f"{name}/{r.name}={r.max_rel_error:.2e}" for name, _, r in results if not r.passed]
    worst = max(r.max_rel_error for _, _, r in results)
    ok = not failed and seconds < 300
    record_acceptance(1, "gradient integrity", ok,
                      f"{len(results)} checks, worst rel err {worst:.2e}, {seconds:.0f}s"
                      + (f", failed: {failed}" if failed else ""))
    assert not failed, failed
    assert seconds < 300


def test_criterion_2_analytic_oracles():
    d = torch.float64
    checks = {}
    a = soft_assign(torch.zeros(1, 1, 1, 1, dtype=d), torch.tensor([0.0, 1.0], dtype=d), 0.1)
    checks["soft_assign"] = abs(a[0, 0, 0, 0].item() - 1 / (1 + math.exp(-10)))
    z, o = torch.zeros(1, 1, dtype=d), torch.ones(1, 1, dtype=d)
    checks["phi_dark"] = abs(flash_intensity(z, z).item() - 1.5)
    checks["phi_bright"] = abs(flash_intensity(o, o).item() - 0.3)
    c1 = imaging.SSIM_C1
    val = imaging.ssim(torch.zeros(3, 16, 16, dtype=d), torch.ones(3, 16, 16, dtype=d)).item()
    checks["ssim_pair"] = abs(val - c1 / (1 + c1))
    white = imaging.rgb_to_lab(torch.ones(3, 1, 1, dtype=d)).view(3)
    black = imaging.rgb_to_lab(torch.zeros(3, 1, 1, dtype=d)).view(3)
    gray = imaging.rgb_to_lab(torch.full((3, 1, 1), 0.5, dtype=d)).view(3)
    lab_tol = {"lab_white": 1e-3}
    checks["lab_white"] = (white - torch.tensor([100.0, 0, 0], dtype=d)).abs().max().item()
    checks["lab_black"] = black.abs().max().item()
    checks["lab_gray_oracle"] = max(abs(x - y) for x, y in zip(gray.tolist(), oracles.lab_pixel(0.5, 0.5, 0.5)))
    checks["lab_gray_L"] = abs(gray[0].item() - 53.39)
    lab_tol["lab_gray_L"] = 5e-3
    x = torch.zeros(3, 4, 4, dtype=d)
    checks["psnr_20db"] = abs(imaging.psnr(x, x + 0.1) - 20.0)
    checks["lr_start"] = abs(cosine_lr(0, 1000) - 1e-4)
    checks["lr_mid"] = abs(cosine_lr(500, 1000) - 5.05e-5)
    checks["lr_end"] = abs(cosine_lr(1000, 1000) - 1e-6)
    bad = {k: v for k, v in checks.items() if v > lab_tol.get(k, 1e-6)}
    record_acceptance(2, "analytic oracles", not bad,
                      f"{len(checks)} values" + (f", off: {bad}" if bad else ""))
    assert not bad, bad


_flash_count = {"n": 0}
_enh_count = {"n": 0}


@settings(max_examples=PROPERTY_CASES, deadline=None, derandomize=True,
          suppress_health_check=list(HealthCheck))
@given(seed=st.integers(0, 2 ** 32 - 1), alpha=st.floats(0.0, 5.0), beta=st.floats(0.0, 2.0),
       gamma=st.floats(0.0, 1.0), tau=st.floats(0.01, 2.0), k=st.integers(1, 8),
       mode=st.sampled_from(["train", "eval"]))
def _flash_property(seed, alpha, beta, gamma, tau, k, mode):
    _flash_count["n"] += 1
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(1, 3, 4, 4, generator=g)
    depth = torch.rand(1, 1, 4, 4, generator=g)
    centers = ClusterCenters(k, tau)
    with torch.no_grad():
        centers.mu.copy_(torch.rand(k, generator=g) * 2 - 0.5)
    out, assign, _ = simulate_flash(img, depth, centers, FlashParams(alpha, beta, gamma), mode, RngStream(seed))
    assert out.min().item() >= 0.0 and out.max().item() <= 1.0
    assert torch.allclose(assign.sum(1), torch.ones(1, 4, 4), atol=1e-5)


_ENH_MODEL = LumenModel(ModelConfig(depth_base=2, main_base=2, clusters=3, heads=1), seed=0).eval()


@settings(max_examples=PROPERTY_CASES, deadline=None, derandomize=True,
          suppress_health_check=list(HealthCheck))
@given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(0.0, 50.0), bias=st.floats(-2.0, 2.0))
def _enhance_property(seed, scale, bias):
    _enh_count["n"] += 1
    g = torch.Generator().manual_seed(seed)
    head = _ENH_MODEL.main.head
    with torch.no_grad():
        head.weight.copy_(scale * torch.randn(head.weight.shape, generator=g))
        head.bias.fill_(bias)
        x = torch.rand(1, 3, 16, 16, generator=g)
        out = _ENH_MODEL(x).i_enh
    assert out.min().item() >= 0.0 and out.max().item() <= 1.0


def test_criterion_3_invariants():
    _flash_count["n"] = _enh_count["n"] = 0
    _flash_property()
    _enhance_property()
    model = LumenModel(ModelConfig(), seed=0).eval()
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        first, second = model(x), model(x)
    identity = torch.equal(first.i_enh, x)
    deterministic = all(torch.equal(getattr(first, f), getattr(second, f))
                        for f in ("i_enh", "d_pred", "i_flash", "assignment"))
    ok = identity and deterministic and _flash_count["n"] >= PROPERTY_CASES and _enh_count["n"] >= PROPERTY_CASES
    record_acceptance(3, "invariants", ok,
                      f"{_flash_count['n']} flash + {_enh_count['n']} enhance cases, "
                      f"identity={identity}, deterministic={deterministic}")
    assert ok


@pytest.mark.slow
def test_criterion_4_overfit(tmp_path):
    r = run_overfit(tmp_path)
    ok = r["psnr_gain"] >= 6.0 and r["loss_drop"] >= 0.5 and r["seconds"] < 900
    record_acceptance(4, "overfit sanity", ok,
                      f"PSNR {r['psnr_low']:.2f} -> {r['psnr_enh']:.2f} dB (gain {r['psnr_gain']:.2f}), "
                      f"loss drop from step 5 {100 * r['loss_drop']:.1f}%, {r['seconds']:.0f}s")
    assert r["psnr_gain"] >= 6.0
    assert r["loss_drop"] >= 0.5
    assert r["seconds"] < 900


def test_criterion_5_attention_tokens():
    report = bench_attention((16, 32, 64, 128))
    shapes = {tuple(s) for row in report["rows"] for s in row["efb"]["score_shapes"]}
    macs = {row["efb"]["macs"] for row in report["rows"]}
    ok = report["pooled_constant"] and report["full_matches_hw"] and shapes == {(1, 4, 64, 64)} and len(macs) == 1
    full = [row["full"]["query_tokens"][0] for row in report["rows"]]
    record_acceptance(5, "pooled attention tokens", ok, f"efb tokens 64 at 16..128, full tokens {full}")
    assert ok


def test_criterion_6_oracle_equivalence():
    worst = {}
    for seed in range(3):
        for k, v in oracles.oracle_equivalence(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
    bad = {k: v for k, v in worst.items() if v > 1e-6}
    record_acceptance(6, "oracle equivalence", not bad, f"max diff {max(worst.values()):.1e} over {len(worst)} quantities")
    assert not bad, bad


def test_criterion_7_serialization(fixture_root, tmp_path):
    cfg = TrainConfig(crop_size=32, batch_size=4, max_steps=2, depth_base=8, main_base=8)
    result = train(cfg, load_dataset(fixture_root, "train", require_depth=True))
    test_set = load_dataset(fixture_root, "test")
    save_checkpoint(tmp_path / "a.ckpt", result.checkpoint)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    bit_exact = list(loaded.tensors) == list(result.checkpoint.tensors) and all(
        torch.equal(loaded.tensors[k], t) and loaded.tensors[k].dtype == t.dtype
        for k, t in result.checkpoint.tensors.items()
    ) and (loaded.step, loaded.seed) == (result.checkpoint.step, result.checkpoint.seed)
    write_report(evaluate(result.model, test_set, step=2), tmp_path / "before.json")
    model, ckpt = load_model(tmp_path / "a.ckpt")
    write_report(evaluate(model, test_set, step=ckpt.step), tmp_path / "after.json")
    same_report = (tmp_path / "before.json").read_bytes() == (tmp_path / "after.json").read_bytes()
    ok = bit_exact and same_report
    record_acceptance(7, "serialization", ok, f"bit_exact={bit_exact}, identical_report={same_report}")
    assert ok
    assert json.loads((tmp_path / "after.json").read_text())["checkpoint_step"] == 2
