"""Six-term training objective and perceptual feature extractors."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import imaging
from .diffcore import RngStream, abs_

Tensor = torch.Tensor

VGG_LAYERS = (3, 8, 17, 26, 35)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
COMPONENTS = ("depth", "recon", "perc", "ssim", "color", "edge")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    depth: float = 0.5
    recon: float = 1.0
    perc: float = 0.1
    ssim: float = 0.5
    color: float = 0.3
    edge: float = 0.2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


class FrozenRandomExtractor(nn.Module):
    """Fixed-seed stand-in for VGG-19 with the same five tap points.

    Stage s has VGG's conv count (2, 2, 4, 4, 4), each conv followed by GELU;
    stages 2-5 max-pool first. Features are tapped after the last activation
    of each stage, the positions relu1_2 .. relu5_4 occupy in VGG-19. GELU
    rather than ReLU keeps features off zero, where the L1 distance between
    two dead units would sit on its kink.
    """

    layers = VGG_LAYERS
    mean = IMAGENET_MEAN
    std = IMAGENET_STD

    def __init__(self, seed: int = 0, widths=(16, 32, 64, 64, 64), depths=(2, 2, 4, 4, 4)):
        super().__init__()
        self.seed = seed
        rng = RngStream(seed).fork("extractor")
        self.stages = nn.ModuleList()
        prev = 3
        for width, n in zip(widths, depths):
            convs = nn.ModuleList()
            for _ in range(n):
                conv = nn.Conv2d(prev, width, 3, padding=1)
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=rng.generator)
                nn.init.zeros_(conv.bias)
                convs.append(conv)
                prev = width
            self.stages.append(convs)
        self.requires_grad_(False)
        self.eval()

    def forward(self, image: Tensor) -> dict[int, Tensor]:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        mean = torch.tensor(self.mean, dtype=image.dtype, device=image.device).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=image.dtype, device=image.device).view(1, 3, 1, 1)
        x = (image - mean) / std
        feats = {}
        for i, (layer, convs) in enumerate(zip(self.layers, self.stages)):
            if i > 0:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            for conv in convs:
                x = F.gelu(conv(x))
            feats[layer] = x
        return feats


# -- external feature files ---------------------------------------------------------
# One record per layer: u32 layer index, u32 rank, rank x u32 dims, then
# prod(dims) float32 values; all little-endian.

def write_feature_file(path, features: dict[int, Tensor]) -> None:
    with open(path, "wb") as fh:
        for layer, t in features.items():
            arr = t.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<II", layer, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_feature_file(path) -> dict[int, Tensor]:
    data = Path(path).read_bytes()
    out, pos = {}, 0
    while pos < len(data):
        layer, rank = struct.unpack_from("<II", data, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        out[layer] = torch.from_numpy(arr.astype(np.float32))
    return out


def image_digest(image: Tensor) -> str:
    """Key an image by the sha256 of its 8-bit quantised [3,H,W] bytes."""
    codes = torch.round(image.detach().to(torch.float64).clamp(0, 1) * 255).to(torch.uint8)
    return hashlib.sha256(codes.contiguous().numpy().tobytes()).hexdigest()


class ExternalFeatureExtractor:
    """Looks up precomputed features as ``<directory>/<image_digest>.feat``.

    Features are constants, so gradients do not flow through this extractor.
    """

    def __init__(self, directory, layers=VGG_LAYERS):
        self.directory = Path(directory)
        self.layers = tuple(layers)

    def __call__(self, image: Tensor) -> dict[int, Tensor]:
        images = image if image.dim() == 4 else image.unsqueeze(0)
        per_image = []
        for img in images:
            path = self.directory / f"{image_digest(img)}.feat"
            if not path.exists():
                raise FileNotFoundError(f"no external features for image at {path}")
            per_image.append(read_feature_file(path))
        return {layer: torch.stack([f[layer] for f in per_image]).to(image.dtype) for layer in self.layers}


# -- components ------------------------------------------------------------------------

def _same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def depth_loss(d_pred: Tensor, d_pseudo: Tensor) -> Tensor:
    _same(d_pred, d_pseudo, "depth_loss")
    return abs_(d_pred - d_pseudo).mean()


def recon_loss(i_enh: Tensor, i_high: Tensor) -> Tensor:
    _same(i_enh, i_high, "recon_loss")
    return abs_(i_enh - i_high).mean()


def perceptual_loss(i_enh: Tensor, i_high: Tensor, extractor) -> Tensor:
    _same(i_enh, i_high, "perceptual_loss")
    fa, fb = extractor(i_enh), extractor(i_high)
    if tuple(fa) != tuple(fb) or tuple(fa) != tuple(extractor.layers):
        raise ValueError(f"extractor layer set mismatch: {tuple(fa)} vs {tuple(fb)}")
    return sum(abs_(fa[j] - fb[j]).mean() for j in fa)


def ssim_loss(i_enh: Tensor, i_high: Tensor) -> Tensor:
    return 1.0 - imaging.ssim(i_enh, i_high)


def color_loss(i_enh: Tensor, i_high: Tensor) -> Tensor:
    _same(i_enh, i_high, "color_loss")
    return abs_(imaging.rgb_to_lab(i_enh) - imaging.rgb_to_lab(i_high)).mean()


def edge_loss(i_enh: Tensor, i_high: Tensor) -> Tensor:
    _same(i_enh, i_high, "edge_loss")
    return abs_(imaging.sobel_grad_mag(i_enh) - imaging.sobel_grad_mag(i_high)).mean()


@dataclass
class LossReport:
    total: Tensor
    components: dict  # name -> Tensor

    def as_floats(self) -> dict:
        out = {"total": self.total.item()}
        out.update({k: v.item() for k, v in self.components.items()})
        return out


def total_loss(i_enh: Tensor, d_pred: Tensor | None, i_high: Tensor, d_pseudo: Tensor | None,
               weights: LossWeights = LossWeights(), extractor=None) -> LossReport:
    """Weighted sum of the six components. Depth is skipped (reported 0) when
    no pseudo-depth is given; perceptual is 0 when no extractor is given."""
    zero = i_enh.new_zeros(())
    comps = {
        "depth": depth_loss(d_pred, d_pseudo) if d_pseudo is not None and d_pred is not None else zero,
        "recon": recon_loss(i_enh, i_high),
        "perc": perceptual_loss(i_enh, i_high, extractor) if extractor is not None else zero,
        "ssim": ssim_loss(i_enh, i_high),
        "color": color_loss(i_enh, i_high),
        "edge": edge_loss(i_enh, i_high),
    }
    for name, value in comps.items():
        if not math.isfinite(value.item()):
            raise NonFiniteLossError(f"loss component {name} is non-finite: {value.item()}")
    w = asdict(weights)
    total = sum(w[k] * comps[k] for k in COMPONENTS)
    return LossReport(total, comps)


def artifacts_loss(artifacts, i_high: Tensor, d_pseudo: Tensor | None,
                   weights: LossWeights = LossWeights(), extractor=None) -> LossReport:
    return total_loss(artifacts.i_enh, artifacts.d_pred, i_high, d_pseudo, weights, extractor)
