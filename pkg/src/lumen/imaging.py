"""Image I/O, sRGB -> CIELAB, Sobel magnitudes and quality metrics.

Images are float tensors in [0, 1], laid out [C, H, W] or [B, C, H, W].
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

Tensor = torch.Tensor

EDGE_EPS = 1e-6
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_FINITE_CAP = 99.0

# D65 reference white, sRGB primaries
D65_WHITE = (0.95047, 1.0, 1.08883)
RGB_TO_XYZ = (
    (0.4124564, 0.3575761, 0.1804375),
    (0.2126729, 0.7151522, 0.0721750),
    (0.0193339, 0.1191920, 0.9503041),
)

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


# -- I/O ---------------------------------------------------------------------

def load_image(path, channels: int = 3) -> Tensor:
    """Read an 8- or 16-bit PNG as float32 [C, H, W] in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
    elif arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        raise OSError(f"{path}: unsupported pixel mode {mode}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if mode == "RGBA" and channels == 3:
        raise OSError(f"{path}: expected {channels} channels, found 4 (RGBA)")
    if arr.shape[2] != channels:
        raise OSError(f"{path}: expected {channels} channels, found {arr.shape[2]}")
    data = arr.astype(np.float64) / scale
    return torch.from_numpy(data.astype(np.float32)).permute(2, 0, 1).contiguous()


def save_image(image: Tensor, path) -> None:
    """Write [3, H, W] as 8-bit RGB PNG."""
    arr = image.detach().to(torch.float64).clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    if arr.shape[2] != 3:
        raise ValueError(f"save_image expects 3 channels, got {arr.shape[2]}")
    codes = np.rint(arr * 255.0).astype(np.uint8)
    Image.fromarray(codes, mode="RGB").save(Path(path))


def load_depth(path) -> Tensor:
    """Read a 1-channel PNG; 16-bit codes map to d / 65535."""
    return load_image(path, channels=1)


def save_depth(depth: Tensor, path) -> None:
    """Write [1, H, W] (or [H, W]) as 16-bit grayscale PNG."""
    arr = depth.detach().to(torch.float64).clamp(0, 1).reshape(depth.shape[-2:]).cpu().numpy()
    codes = np.rint(arr * 65535.0).astype(np.uint16)
    Image.fromarray(codes).save(Path(path))


def center_crop_multiple(image: Tensor, multiple: int = 16) -> Tensor:
    h, w = image.shape[-2:]
    nh, nw = (h // multiple) * multiple, (w // multiple) * multiple
    if nh == 0 or nw == 0:
        raise ValueError(f"image {h}x{w} is smaller than {multiple} pixels")
    top, left = (h - nh) // 2, (w - nw) // 2
    return image[..., top:top + nh, left:left + nw]


# -- colour --------------------------------------------------------------------

def _check_range(image: Tensor, name: str = "image") -> None:
    if image.numel() and (image.min().item() < 0.0 or image.max().item() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")


def srgb_to_linear(x: Tensor) -> Tensor:
    return torch.where(x <= 0.04045, x / 12.92, ((x.clamp(min=0.04045) + 0.055) / 1.055) ** 2.4)


def _lab_f(t: Tensor) -> Tensor:
    delta = 6.0 / 29.0
    return torch.where(t > delta ** 3, t.clamp(min=delta ** 3) ** (1.0 / 3.0),
                       t / (3 * delta ** 2) + 4.0 / 29.0)


def rgb_to_lab(image: Tensor) -> Tensor:
    """sRGB in [0, 1] -> CIELAB (D65) along the channel axis (-3)."""
    _check_range(image)
    lin = srgb_to_linear(image)
    m = torch.tensor(RGB_TO_XYZ, dtype=image.dtype, device=image.device)
    xyz = torch.einsum("ij,...jhw->...ihw", m, lin)
    white = torch.tensor(D65_WHITE, dtype=image.dtype, device=image.device).view(3, 1, 1)
    f = _lab_f(xyz / white)
    fx, fy, fz = f.unbind(dim=-3)
    return torch.stack((116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)), dim=-3)


# -- gradients -------------------------------------------------------------------

def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {tuple(x.shape)}")


def sobel_grad_mag(image: Tensor, eps: float = EDGE_EPS) -> Tensor:
    """Per-channel sqrt((I*Sx)^2 + (I*Sy)^2 + eps), replicate-padded borders."""
    x, squeeze = _as_batch(image)
    c = x.shape[1]
    sx = torch.tensor(SOBEL_X, dtype=x.dtype, device=x.device)
    kernels = torch.stack((sx, sx.t())).unsqueeze(1).repeat(c, 1, 1, 1)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    g = F.conv2d(padded, kernels, groups=c)
    gx, gy = g[:, 0::2], g[:, 1::2]
    mag = torch.sqrt(gx * gx + gy * gy + eps)
    return mag.squeeze(0) if squeeze else mag


# -- metrics ---------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
                    dtype=torch.float64) -> Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    xb, squeeze = _as_batch(x)
    yb, _ = _as_batch(y)
    c = xb.shape[1]
    win = gaussian_window(dtype=xb.dtype).to(xb.device)
    kernel = win.expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    pad = SSIM_WINDOW // 2

    def blur(t: Tensor) -> Tensor:
        return F.conv2d(F.pad(t, (pad, pad, pad, pad), mode="replicate"), kernel, groups=c)

    mu_x, mu_y = blur(xb), blur(yb)
    var_x = blur(xb * xb) - mu_x ** 2
    var_y = blur(yb * yb) - mu_y ** 2
    cov = blur(xb * yb) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    out = num / den
    return out.squeeze(0) if squeeze else out


def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Mean single-scale SSIM over pixels and channels (and batch)."""
    return ssim_map(x, y).mean()


def _check_same(x: Tensor, y: Tensor, what: str) -> None:
    if x.shape != y.shape:
        raise ValueError(f"{what} shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def mse(x: Tensor, y: Tensor) -> float:
    _check_same(x, y, "mse")
    return ((x.to(torch.float64) - y.to(torch.float64)) ** 2).mean().item()


def psnr(x: Tensor, y: Tensor) -> float:
    """PSNR in dB with peak 1.0; ``math.inf`` for identical inputs."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def mae(x: Tensor, y: Tensor) -> float:
    _check_same(x, y, "mae")
    return (x.to(torch.float64) - y.to(torch.float64)).abs().mean().item()


def finite_psnr(value: float) -> float:
    return PSNR_FINITE_CAP if math.isinf(value) else value


def format_psnr(value: float):
    return "inf" if math.isinf(value) else value
