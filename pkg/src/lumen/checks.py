"""Finite-difference gradient checks over every differentiable stage.

Each case is built from a seed and checked with the kink monitor on. Probes
that straddle a non-differentiable point (LeakyReLU sign, max-pool argmax,
clamp boundary, |.| sign, channel max) are excluded from the error; an
instance where more than a quarter of the probes straddle one is rejected
and the next seed is tried.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn

from . import losses
from .diffcore import (
    DoubleConv,
    GradcheckResult,
    adaptive_avg_pool2d,
    bilinear_upsample,
    conv2d,
    gradcheck,
    multi_head_attention,
)
from .enhancer import LumenModel, ModelConfig
from .flash import FlashEncoder, FlashParams, apply_flash, cluster_stats, flash_intensity, soft_assign
from .fusion import EfficientFusionBlock

DTYPE = torch.float64
H = 1e-4
TOL = 1e-3
MAX_TRIES = 12
MAX_CROSSED_FRACTION = 0.25

# Flash constants small enough that I + field stays below 1, so the clamp
# passes gradients; with the default constants the flash image saturates.
SOFT_FLASH = FlashParams(alpha=0.2, beta=0.1, gamma=0.1)


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _leaf(t: torch.Tensor) -> torch.Tensor:
    return t.to(DTYPE).requires_grad_(True)


def _rand(*shape, seed=0, lo=0.0, hi=1.0):
    return _leaf(lo + (hi - lo) * torch.rand(*shape, generator=_gen(seed), dtype=DTYPE))


def _randn(*shape, seed=0, scale=1.0):
    return _leaf(scale * torch.randn(*shape, generator=_gen(seed), dtype=DTYPE))


def _perturb_zero_inits(module: nn.Module, seed: int, scale: float = 0.05) -> None:
    """Give zero-initialised output layers small random weights so gradients flow."""
    g = _gen(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, EfficientFusionBlock):
                last = m.ffn[-1]
                last.weight.copy_(scale * torch.randn(last.weight.shape, generator=g, dtype=last.weight.dtype))
            if isinstance(m, LumenModel):
                m.main.head.weight.copy_(scale * torch.randn(m.main.head.weight.shape, generator=g,
                                                             dtype=m.main.head.weight.dtype))


# Each case returns (scalar closure, {name: leaf tensor}, gradcheck kwargs).

def case_conv2d(seed: int):
    x = _randn(2, 3, 5, 5, seed=seed)
    w = _randn(4, 3, 3, 3, seed=seed + 1)
    b = _randn(4, seed=seed + 2)
    return lambda: conv2d(x, w, b, padding=1).pow(2).sum(), {"x": x, "weight": w, "bias": b}, {}


def case_adaptive_pool(seed: int):
    x = _randn(1, 2, 10, 6, seed=seed)
    probe = torch.randn(1, 2, 4, 4, generator=_gen(seed + 1), dtype=DTYPE)
    return lambda: (adaptive_avg_pool2d(x, 4) * probe).sum(), {"x": x}, {}


def case_bilinear(seed: int):
    x = _randn(1, 2, 3, 4, seed=seed)
    probe = torch.randn(1, 2, 7, 9, generator=_gen(seed + 1), dtype=DTYPE)
    return lambda: (bilinear_upsample(x, 7, 9) * probe).sum(), {"x": x}, {}


def case_attention(seed: int):
    q = _randn(1, 4, 8, seed=seed)
    kv = _randn(1, 5, 8, seed=seed + 1)
    ws = {n: _randn(8, 8, seed=seed + 2 + i, scale=0.4) for i, n in enumerate(("w_q", "w_k", "w_v", "w_o"))}
    probe = torch.randn(1, 4, 8, generator=_gen(seed + 9), dtype=DTYPE)

    def f():
        return (multi_head_attention(q, kv, kv, 2, ws["w_q"], ws["w_k"], ws["w_v"], ws["w_o"]) * probe).sum()

    return f, {"query": q, "key_value": kv, **ws}, {}


def case_norms_and_activations(seed: int):
    torch.manual_seed(seed)
    block = DoubleConv(3, 4).to(DTYPE)
    block.train()
    ln = nn.LayerNorm(4).to(DTYPE)
    x = _randn(2, 3, 6, 6, seed=seed)
    probe = torch.randn(2, 6, 6, 4, generator=_gen(seed + 1), dtype=DTYPE)
    gelu = nn.GELU()

    def f():
        y = block(x).permute(0, 2, 3, 1)
        return (gelu(ln(y)) * probe).sum() + torch.sigmoid(y).sum() + torch.softmax(y, -1)[..., 0].sum()

    # Conv biases feeding train-mode batch norm have an exact zero gradient,
    # which the relative metric cannot resolve from round-off; they are
    # covered by a direct zero-gradient test instead.
    skip = {"0.bias", "3.bias"}
    params = {f"block.{n}": p for n, p in block.named_parameters() if n not in skip}
    return f, {"x": x, **params}, {}


def case_flash_chain(seed: int, params: FlashParams = SOFT_FLASH):
    depth = _rand(1, 1, 6, 6, seed=seed, lo=0.05, hi=0.95)
    mu = _leaf(torch.tensor([0.1, 0.37, 0.62, 0.9]))
    image = _rand(1, 3, 6, 6, seed=seed + 1, lo=0.05, hi=0.35)

    def f():
        a = soft_assign(depth, mu, 0.1)
        mean_i, max_r = cluster_stats(image, a, params)
        phi = flash_intensity(mean_i, max_r, params, "eval")
        return apply_flash(image, phi, a).mean()

    return f, {"depth": depth, "centers": mu, "image": image}, {}


def _loss_inputs(seed: int):
    gen = _gen(seed)
    x = 0.15 + 0.7 * torch.rand(1, 3, 8, 8, generator=gen, dtype=DTYPE)
    sign = torch.where(torch.rand(1, 3, 8, 8, generator=gen, dtype=DTYPE) > 0.5, 1.0, -1.0).to(DTYPE)
    y = (x + sign * (0.05 + 0.05 * torch.rand(1, 3, 8, 8, generator=gen, dtype=DTYPE))).clamp(0.01, 0.99)
    d_pred = _rand(1, 1, 8, 8, seed=seed + 1, lo=0.1, hi=0.4)
    d_pseudo = torch.rand(1, 1, 8, 8, generator=gen, dtype=DTYPE) * 0.3 + 0.6
    return _leaf(x), y, d_pred, d_pseudo


def _loss_case(component: str):
    def case(seed: int):
        i_enh, y, d_pred, d_pseudo = _loss_inputs(seed)
        extractor = losses.FrozenRandomExtractor(0).to(DTYPE)
        fns = {
            "depth": lambda: losses.depth_loss(d_pred, d_pseudo),
            "recon": lambda: losses.recon_loss(i_enh, y),
            "perc": lambda: losses.perceptual_loss(i_enh, y, extractor),
            "ssim": lambda: losses.ssim_loss(i_enh, y),
            "color": lambda: losses.color_loss(i_enh, y),
            "edge": lambda: losses.edge_loss(i_enh, y),
            "total": lambda: losses.total_loss(i_enh, d_pred, y, d_pseudo, losses.LossWeights(),
                                               extractor).total,
        }
        wrt = {"d_pred": d_pred} if component == "depth" else {"i_enh": i_enh}
        if component == "total":
            wrt = {"i_enh": i_enh, "d_pred": d_pred}
        return fns[component], wrt, {}
    return case


def case_efb(seed: int):
    torch.manual_seed(seed)
    efb = EfficientFusionBlock(8, 8, pool=8, heads=2).to(DTYPE)
    _perturb_zero_inits(efb, seed + 1, scale=0.3)
    efb.eval()
    f_m = _randn(1, 8, 16, 16, seed=seed + 2)
    f_d = _randn(1, 4, 16, 16, seed=seed + 3)
    f_f = _randn(1, 4, 16, 16, seed=seed + 4)
    return lambda: efb(f_m, f_d, f_f).mean(), {"F_m": f_m, "F_d": f_d, "F_f": f_f}, {"max_elements": 96}


def case_flash_encoder(seed: int):
    torch.manual_seed(seed)
    enc = FlashEncoder(4).to(DTYPE)
    enc.eval()
    x = _rand(1, 3, 16, 16, seed=seed, lo=0.1, hi=0.9)
    probes = [torch.randn(1, 4 * 2 ** i, 16 >> i, 16 >> i, generator=_gen(seed + 1 + i), dtype=DTYPE)
              for i in range(5)]
    return (lambda: sum((f * p).sum() for f, p in zip(enc(x), probes)),
            {"flash_image": x}, {"max_elements": 96})


def reduced_model(flash: FlashParams = FlashParams(), seed: int = 0) -> LumenModel:
    """C=8, C_d=8, K=2 model in float64 eval mode with live output layers."""
    cfg = ModelConfig(depth_base=8, main_base=8, clusters=2, heads=4, flash=flash)
    model = LumenModel(cfg, seed=seed).to(DTYPE)
    _perturb_zero_inits(model, seed + 100)
    model.eval()
    return model


def case_depthnet(seed: int):
    model = reduced_model(seed=seed)
    x = _rand(1, 3, 16, 16, seed=seed, lo=0.1, hi=0.6)
    w = model.depth.encoder.levels[0][0].weight
    return lambda: model.depth(x)[0].mean(), {"depth.first_conv.weight": w}, {}


def case_end_to_end(seed: int, flash: FlashParams = FlashParams()):
    model = reduced_model(flash, seed=seed)
    gen = _gen(seed)
    x = 0.1 + 0.3 * torch.rand(1, 3, 16, 16, generator=gen, dtype=DTYPE)
    target = 0.75 + 0.2 * torch.rand(1, 3, 16, 16, generator=gen, dtype=DTYPE)
    wrt = {
        "main.first_conv.weight": model.main.encoder[0][0].weight,
        "centers.mu": model.centers.mu,
        "depth.first_conv.weight": model.depth.encoder.levels[0][0].weight,
    }
    return lambda: losses.recon_loss(model(x).i_enh, target), wrt, {"max_elements": 64}


CASES: dict[str, Callable] = {
    "conv2d": case_conv2d,
    "adaptive_avg_pool2d": case_adaptive_pool,
    "bilinear_upsample": case_bilinear,
    "multi_head_attention": case_attention,
    "norms_activations": case_norms_and_activations,
    "flash_chain": case_flash_chain,
    "flash_chain_default_constants": lambda seed: case_flash_chain(seed, FlashParams()),
    **{f"loss_{c}": _loss_case(c) for c in ("depth", "recon", "perc", "ssim", "color", "edge", "total")},
    "efb": case_efb,
    "flash_encoder": case_flash_encoder,
    "depthnet": case_depthnet,
    "end_to_end": case_end_to_end,
    "end_to_end_soft_flash": lambda seed: case_end_to_end(seed, SOFT_FLASH),
}


def run_case(case: Callable, tol: float = TOL, max_tries: int = MAX_TRIES) -> tuple[int, list[GradcheckResult]]:
    """Check the first seeded instance that is mostly away from kinks."""
    results: list[GradcheckResult] = []
    for seed in range(max_tries):
        f, wrt, kwargs = case(seed)
        results = gradcheck(f, wrt, H, tol, monitor=True, **kwargs)
        if all(r.kink_crossings <= MAX_CROSSED_FRACTION * r.probes for r in results):
            return seed, results
    for r in results:
        r.passed = False
        r.note = f"no instance with <= {MAX_CROSSED_FRACTION:.0%} kink crossings in {max_tries} seeds"
    return max_tries - 1, results


def run_all(tol: float = TOL) -> list[tuple[str, int, GradcheckResult]]:
    out = []
    for name, case in CASES.items():
        seed, results = run_case(case, tol)
        out.extend((name, seed, r) for r in results)
    return out
