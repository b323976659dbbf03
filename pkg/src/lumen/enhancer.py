"""Main enhancement network and the assembled model."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn as nn

from .depthnet import LEVELS, Decoder, DepthNet, channel_ladder, check_divisible
from .diffcore import DoubleConv, RngStream, clamp01, init_weights, max_pool2d
from .flash import ClusterCenters, FlashEncoder, FlashParams, simulate_flash
from .fusion import EfficientFusionBlock

Tensor = torch.Tensor

PREFIXES = ("depth.", "centers", "flashenc.", "main.")


@dataclass(frozen=True)
class ModelConfig:
    depth_base: int = 64
    main_base: int = 32
    clusters: int = 8
    tau: float = 0.1
    pool: int = 8
    heads: int = 4
    dropout: float = 0.1
    fuse_gamma: float = 0.1
    depth_detach: bool = False
    prenorm: bool = False
    flash: FlashParams = FlashParams()


@dataclass
class ForwardArtifacts:
    i_enh: Tensor
    d_pred: Tensor
    i_flash: Tensor
    assignment: Tensor
    phi: Tensor
    depth_features: list
    flash_features: list
    encoder_features: list  # fused E^(l)


class MainNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = channel_ladder(cfg.main_base)
        aux = [2 * c for c in channel_ladder(cfg.depth_base)]
        self.encoder = nn.ModuleList()
        prev = 3
        for ch in chans:
            self.encoder.append(DoubleConv(prev, ch))
            prev = ch
        self.fusion = nn.ModuleList(
            EfficientFusionBlock(ch, a, cfg.pool, cfg.heads, cfg.dropout, cfg.fuse_gamma, cfg.prenorm)
            for ch, a in zip(chans, aux)
        )
        self.decoder = Decoder(cfg.main_base)
        self.head = nn.Conv2d(cfg.main_base, 3, 1)

    def forward(self, i_low: Tensor, depth_feats, flash_feats, rng: RngStream | None = None):
        x = i_low
        fused = []
        for level, (conv, efb) in enumerate(zip(self.encoder, self.fusion)):
            if level > 0:
                x = max_pool2d(x)
            sub = rng.fork(f"efb{level}") if rng is not None else None
            x = efb(conv(x), depth_feats[level], flash_feats[level], rng=sub)
            fused.append(x)
        residual = self.head(self.decoder(fused))
        return clamp01(residual + i_low), fused


class LumenModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.depth = DepthNet(cfg.depth_base)
        self.centers = ClusterCenters(cfg.clusters, cfg.tau)
        self.flashenc = FlashEncoder(cfg.depth_base)
        self.main = MainNet(cfg)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        rng = RngStream(seed)
        for name in ("depth", "flashenc", "main"):
            init_weights(getattr(self, name), rng.fork(f"init/{name}"))
        with torch.no_grad():
            self.centers.mu.copy_(torch.linspace(0.0, 1.0, self.cfg.clusters))
        for efb in self.main.fusion:
            efb.reset_identity()
        nn.init.zeros_(self.main.head.weight)
        nn.init.zeros_(self.main.head.bias)

    def forward(self, i_low: Tensor, rng: RngStream | None = None) -> ForwardArtifacts:
        check_divisible(i_low)
        if i_low.shape[1] != 3:
            raise ValueError(f"expected 3-channel input, got {i_low.shape[1]}")
        mode = "train" if self.training else "eval"
        d_pred, depth_feats = self.depth(i_low)
        d_in = d_pred.detach() if self.cfg.depth_detach else d_pred
        if self.cfg.depth_detach:
            depth_feats = [f.detach() for f in depth_feats]
        i_flash, assign, phi = simulate_flash(
            i_low, d_in, self.centers, self.cfg.flash, mode,
            rng.fork("flash") if rng is not None else None,
        )
        flash_feats = self.flashenc(i_flash)
        i_enh, fused = self.main(i_low, depth_feats, flash_feats,
                                 rng.fork("main") if rng is not None else None)
        return ForwardArtifacts(i_enh, d_pred, i_flash, assign, phi, depth_feats, flash_feats, fused)

    def after_step(self) -> None:
        self.centers.clamp_()


def lumen_forward(i_low: Tensor, model: LumenModel, mode: str = "eval",
                  rng: RngStream | None = None) -> ForwardArtifacts:
    model.train(mode == "train")
    return model(i_low, rng)


def count_parameters(model: nn.Module) -> "OrderedDict[str, int]":
    """Trainable parameter counts per checkpoint prefix, plus 'total'."""
    counts: OrderedDict[str, int] = OrderedDict((p, 0) for p in PREFIXES)
    for name, p in model.named_parameters():
        for prefix in PREFIXES:
            if name.startswith(prefix):
                counts[prefix] += p.numel()
                break
        else:
            raise KeyError(f"parameter {name} has no known prefix")
    counts["total"] = sum(counts.values())
    return counts


def infer_config(shapes: dict[str, tuple], **overrides) -> ModelConfig:
    """Recover channel widths and cluster count from checkpoint tensor shapes."""
    try:
        depth_base = shapes["depth.encoder.levels.0.0.weight"][0]
        main_base = shapes["main.encoder.0.0.weight"][0]
        clusters = shapes["centers.mu"][0]
    except KeyError as exc:
        raise ValueError(f"checkpoint lacks parameter {exc.args[0]}") from exc
    return ModelConfig(depth_base=depth_base, main_base=main_base, clusters=clusters, **overrides)


__all__ = [
    "ForwardArtifacts", "LumenModel", "MainNet", "ModelConfig", "count_parameters",
    "infer_config", "lumen_forward", "LEVELS",
]
