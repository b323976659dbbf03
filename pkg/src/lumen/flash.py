"""Depth clustering, virtual flash simulation and the flash feature encoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .depthnet import Encoder
from .diffcore import KinkMonitor, RngStream, abs_, clamp01

Tensor = torch.Tensor

CENTER_BOUNDS = (-0.5, 1.5)


@dataclass(frozen=True)
class FlashParams:
    alpha: float = 1.5    # base intensity
    beta: float = 0.3     # highlight preservation
    gamma: float = 0.1    # noise scale, training only
    eps: float = 1e-8


class ClusterCenters(nn.Module):
    """K learnable depth centres, evenly spaced over [0, 1] at init."""

    def __init__(self, k: int = 8, tau: float = 0.1):
        super().__init__()
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.tau = tau
        self.mu = nn.Parameter(torch.linspace(0.0, 1.0, k))

    @property
    def k(self) -> int:
        return self.mu.numel()

    @torch.no_grad()
    def clamp_(self) -> None:
        self.mu.clamp_(*CENTER_BOUNDS)


def soft_assign(depth: Tensor, mu: Tensor, tau: float = 0.1) -> Tensor:
    """depth [B,1,H,W], mu [K] -> soft assignment [B,K,H,W] summing to 1 over K."""
    dist = abs_(depth - mu.view(1, -1, 1, 1))
    return torch.softmax(-dist / tau, dim=1)


def cluster_stats(image: Tensor, assign: Tensor, params: FlashParams = FlashParams()):
    """Per-cluster weighted mean intensity and mean max-channel response, each [B,K]."""
    mean_c = image.mean(dim=1, keepdim=True)
    max_c = image.amax(dim=1, keepdim=True)
    if KinkMonitor.active is not None:
        KinkMonitor.observe(image.argmax(dim=1))
    mass = assign.sum(dim=(2, 3)) + params.eps
    mean_intensity = (assign * mean_c).sum(dim=(2, 3)) / mass
    max_response = (assign * max_c).sum(dim=(2, 3)) / mass
    return mean_intensity, max_response


def flash_intensity(mean_intensity: Tensor, max_response: Tensor,
                    params: FlashParams = FlashParams(), mode: str = "eval",
                    rng: RngStream | None = None) -> Tensor:
    """phi_k = alpha (1 - I_k) + beta M_k [+ gamma n_k in training], shape [B,K]."""
    phi = params.alpha * (1.0 - mean_intensity) + params.beta * max_response
    if mode == "train" and params.gamma:
        if rng is not None:
            noise = rng.normal(*phi.shape, dtype=phi.dtype)
        else:
            noise = torch.randn_like(phi)
        phi = phi + params.gamma * noise
    return phi


def apply_flash(image: Tensor, phi: Tensor, assign: Tensor) -> Tensor:
    """clamp(I + sum_k phi_k A_k, 0, 1); the flash field is shared by all channels."""
    field = (phi[:, :, None, None] * assign).sum(dim=1, keepdim=True)
    return clamp01(image + field)


def simulate_flash(image: Tensor, depth: Tensor, centers: ClusterCenters,
                   params: FlashParams = FlashParams(), mode: str = "eval",
                   rng: RngStream | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Full clustering + flash chain; returns (i_flash, assignment, phi)."""
    assign = soft_assign(depth, centers.mu, centers.tau)
    mean_i, max_r = cluster_stats(image, assign, params)
    phi = flash_intensity(mean_i, max_r, params, mode, rng)
    return apply_flash(image, phi, assign), assign, phi


class FlashEncoder(Encoder):
    """Same layout as the depth encoder, separate weights."""

    def __init__(self, base: int = 64):
        super().__init__(3, base)


def flash_encode(flash_image: Tensor, encoder: FlashEncoder, mode: str = "eval") -> list[Tensor]:
    encoder.train(mode == "train")
    return encoder(flash_image)
