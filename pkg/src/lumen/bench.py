"""Pooled vs. full attention cost probe."""

from __future__ import annotations

import time

import torch

from .diffcore import counting_attention
from .fusion import EfficientFusionBlock, full_attention_reference


@torch.no_grad()
def bench_attention(sizes=(16, 32, 64, 128), channels: int = 32, aux_channels: int = 128,
                    pool: int = 8, heads: int = 4, seed: int = 0) -> dict:
    """Run one EFB and the full-attention reference at each square size.

    Counts come from the attention instrumentation, not from formulas.
    """
    gen = torch.Generator().manual_seed(seed)
    efb = EfficientFusionBlock(channels, aux_channels, pool, heads).eval()
    rows = []
    for s in sizes:
        f_m = torch.randn(1, channels, s, s, generator=gen)
        f_d = torch.randn(1, aux_channels // 2, s, s, generator=gen)
        f_f = torch.randn(1, aux_channels // 2, s, s, generator=gen)
        t0 = time.perf_counter()
        with counting_attention() as counter:
            efb(f_m, f_d, f_f)
        pooled_calls = [dict(c) for c in counter.calls]
        t_pooled = time.perf_counter() - t0
        t0 = time.perf_counter()
        with counting_attention() as counter:
            full_attention_reference(f_m, efb.self_attn)
        full_calls = [dict(c) for c in counter.calls]
        t_full = time.perf_counter() - t0
        rows.append({
            "size": s,
            "pixels": s * s,
            "efb": {
                "query_tokens": [c["query_tokens"] for c in pooled_calls],
                "key_tokens": [c["key_tokens"] for c in pooled_calls],
                "score_shapes": [c["score_shape"] for c in pooled_calls],
                "macs": sum(c["macs"] for c in pooled_calls),
                "seconds": t_pooled,
            },
            "full": {
                "query_tokens": [c["query_tokens"] for c in full_calls],
                "key_tokens": [c["key_tokens"] for c in full_calls],
                "score_shapes": [c["score_shape"] for c in full_calls],
                "macs": sum(c["macs"] for c in full_calls),
                "seconds": t_full,
            },
        })
    pooled_tokens = {t for r in rows for t in r["efb"]["query_tokens"] + r["efb"]["key_tokens"]}
    return {
        "pool": pool,
        "expected_tokens": pool * pool,
        "rows": rows,
        "pooled_constant": pooled_tokens == {pool * pool},
        "full_matches_hw": all(
            set(r["full"]["query_tokens"] + r["full"]["key_tokens"]) == {r["pixels"]} for r in rows
        ),
    }
