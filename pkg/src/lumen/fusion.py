"""Efficient Fusion Block: attention on a fixed P x P token grid.

Main, depth and flash features are average-pooled to P x P before any
attention, so the score matrix is [B, heads, P^2, P^2] at every resolution.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .diffcore import (
    BN_MOMENTUM,
    MultiHeadAttention,
    RngStream,
    adaptive_avg_pool2d,
    bilinear_resize,
    concat_channels,
)

Tensor = torch.Tensor


def to_tokens(x: Tensor) -> Tensor:
    """[B, C, P, P] -> [B, P*P, C], row-major over the grid."""
    return x.flatten(2).transpose(1, 2)


def from_tokens(t: Tensor, p: int) -> Tensor:
    b, n, c = t.shape
    return t.transpose(1, 2).reshape(b, c, p, p)


class EfficientFusionBlock(nn.Module):
    def __init__(self, channels: int, aux_channels: int, pool: int = 8, heads: int = 4,
                 dropout: float = 0.1, gamma: float = 0.1, prenorm: bool = False):
        super().__init__()
        self.channels = channels
        self.aux_channels = aux_channels
        self.pool = pool
        self.gamma = gamma
        # prenorm=True feeds LayerNorm output into attention (experiment flag);
        # default follows the literal residual LN(x) + MHA(x).
        self.prenorm = prenorm
        self.self_norm = nn.LayerNorm(channels)
        self.self_attn = MultiHeadAttention(channels, heads, dropout)
        self.aux_proj = nn.Conv2d(aux_channels, channels, 1)
        self.cross_norm = nn.LayerNorm(channels)
        self.cross_attn = MultiHeadAttention(channels, heads, dropout)
        self.ffn = nn.Sequential(
            nn.Conv2d(channels, channels, 1),
            nn.BatchNorm2d(channels, momentum=BN_MOMENTUM),
            nn.GELU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def reset_identity(self) -> None:
        """Zero the FFN's last conv so the block starts as the identity."""
        nn.init.zeros_(self.ffn[-1].weight)
        nn.init.zeros_(self.ffn[-1].bias)

    def attend(self, f_m: Tensor, f_d: Tensor, f_f: Tensor, rng: RngStream | None = None) -> Tensor:
        """Pooled self- then cross-attention; returns F_cross as [B, C, P, P]."""
        p = self.pool
        if f_m.shape[1] != self.channels:
            raise ValueError(f"EFB expects {self.channels} main channels, got {f_m.shape[1]}")
        if f_d.shape[1] + f_f.shape[1] != self.aux_channels:
            raise ValueError(
                f"EFB expects {self.aux_channels} auxiliary channels, "
                f"got {f_d.shape[1]} + {f_f.shape[1]}"
            )
        m = to_tokens(adaptive_avg_pool2d(f_m, p))
        aux = self.aux_proj(concat_channels((adaptive_avg_pool2d(f_d, p), adaptive_avg_pool2d(f_f, p))))
        aux = to_tokens(aux)
        r_self = rng.fork("self") if rng is not None else None
        r_cross = rng.fork("cross") if rng is not None else None

        m_n = self.self_norm(m)
        q = m_n if self.prenorm else m
        f_self = m_n + self.self_attn(q, q, q, rng=r_self)
        s_n = self.cross_norm(f_self)
        q = s_n if self.prenorm else f_self
        f_cross = s_n + self.cross_attn(q, aux, aux, rng=r_cross)
        return from_tokens(f_cross, p)

    def forward(self, f_m: Tensor, f_d: Tensor, f_f: Tensor, rng: RngStream | None = None) -> Tensor:
        f_cross = self.attend(f_m, f_d, f_f, rng)
        up = bilinear_resize(f_cross, *f_m.shape[-2:])
        return f_m + self.ffn(f_m + self.gamma * up)


def full_attention_reference(f_m: Tensor, attn: MultiHeadAttention, query_chunk: int = 1024) -> Tensor:
    """Self-attention over every spatial position (HW tokens), for benchmarking only."""
    b, c, h, w = f_m.shape
    tokens = f_m.flatten(2).transpose(1, 2)
    out = attn(tokens, tokens, tokens, query_chunk=query_chunk)
    return out.transpose(1, 2).reshape(b, c, h, w)
