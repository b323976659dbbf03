"""Low-light depth estimation U-Net.

Five encoder levels with channels base * 2**(l-1); level 1 runs at full
resolution, levels 2-5 max-pool first. The decoder upsamples bilinearly,
concatenates the matching encoder feature and refines with a double conv.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .diffcore import DoubleConv, bilinear_upsample, concat_channels, max_pool2d

LEVELS = 5
DIVISOR = 2 ** (LEVELS - 1)


def channel_ladder(base: int) -> list[int]:
    return [base * 2 ** i for i in range(LEVELS)]


def check_divisible(x: torch.Tensor) -> None:
    h, w = x.shape[-2:]
    if h % DIVISOR or w % DIVISOR:
        raise ValueError(f"input height and width must be divisible by {DIVISOR}, got {h}x{w}")


class Encoder(nn.Module):
    def __init__(self, in_ch: int = 3, base: int = 64):
        super().__init__()
        chans = channel_ladder(base)
        self.levels = nn.ModuleList()
        prev = in_ch
        for ch in chans:
            self.levels.append(DoubleConv(prev, ch))
            prev = ch

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_divisible(x)
        feats = []
        for i, level in enumerate(self.levels):
            if i > 0:
                x = max_pool2d(x)
            x = level(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Mirror of the encoder: upsample, concat skip, double conv, per level."""

    def __init__(self, base: int):
        super().__init__()
        chans = channel_ladder(base)
        self.levels = nn.ModuleList(
            DoubleConv(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(LEVELS - 1))
        )

    def forward(self, skips: list[torch.Tensor]) -> torch.Tensor:
        x = skips[-1]
        for level, skip in zip(self.levels, reversed(skips[:-1])):
            x = bilinear_upsample(x, *skip.shape[-2:])
            x = level(concat_channels((x, skip)))
        return x


class DepthNet(nn.Module):
    def __init__(self, base: int = 64):
        super().__init__()
        self.base = base
        self.encoder = Encoder(3, base)
        self.decoder = Decoder(base)
        self.head = nn.Conv2d(base, 1, 1)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return (d_pred [B,1,H,W] in (0,1), five encoder features)."""
        feats = self.encoder(image)
        d_pred = torch.sigmoid(self.head(self.decoder(feats)))
        return d_pred, feats


def depth_forward(image: torch.Tensor, net: DepthNet, mode: str = "eval"):
    net.train(mode == "train")
    return net(image)
