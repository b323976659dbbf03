"""Differentiable building blocks shared by every network and loss.

Autograd is delegated to PyTorch; the ops here fix the conventions the rest
of the package relies on (pooling bins, interpolation alignment, attention
dropout) and add a finite-difference gradient checker.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.1


class RngStream:
    """Seeded random stream backed by PyTorch's CPU Mersenne Twister.

    Substreams are derived deterministically: the child seed is the first
    8 bytes (little-endian) of sha256("<parent seed>/<name>").
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed)

    def fork(self, name: str) -> "RngStream":
        digest = hashlib.sha256(f"{self.seed}/{name}".encode()).digest()
        return RngStream(int.from_bytes(digest[:8], "little"))

    def normal(self, *shape: int, dtype=torch.float32) -> Tensor:
        return torch.randn(*shape, generator=self.generator, dtype=dtype)

    def uniform(self, *shape: int, dtype=torch.float32) -> Tensor:
        return torch.rand(*shape, generator=self.generator, dtype=dtype)

    def randint(self, high: int) -> int:
        return int(torch.randint(high, (1,), generator=self.generator).item())

    def permutation(self, n: int) -> list[int]:
        return torch.randperm(n, generator=self.generator).tolist()


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"weight {tuple(weight.shape)} expects {weight.shape[1]}"
        )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def _bin_matrix(n: int, p: int, dtype, device) -> Tensor:
    # Bin b covers [floor(b*n/p), floor((b+1)*n/p)); widened to one element when n < p.
    m = torch.zeros(p, n, dtype=dtype, device=device)
    for b in range(p):
        lo = (b * n) // p
        hi = max(((b + 1) * n) // p, lo + 1)
        m[b, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Average-pool the last two axes onto a size x size grid.

    Bins partition the input without overlap. When an axis is shorter than
    ``size`` each bin takes the single element it starts on, so the grid is
    still size x size.
    """
    if size <= 0:
        raise ValueError(f"pool size must be positive, got {size}")
    h, w = x.shape[-2:]
    rows = _bin_matrix(h, size, x.dtype, x.device)
    cols = _bin_matrix(w, size, x.dtype, x.device)
    return rows @ x @ cols.transpose(0, 1)


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    if height <= 0 or width <= 0:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    if x.shape[-2:] == (height, width):
        return x
    return F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)


def bilinear_upsample(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear upsampling with half-pixel centres (align_corners=False).

    Output pixel j samples the source at (j + 0.5) * W / W2 - 0.5, clamped to
    the border, so [[0, 1]] resized to width 4 gives [0, 0.25, 0.75, 1].
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    if height < x.shape[-2] or width < x.shape[-1]:
        raise ValueError(f"cannot upsample {tuple(x.shape[-2:])} to smaller {(height, width)}")
    return bilinear_resize(x, height, width)


class KinkMonitor:
    """Records which side of each kink the piecewise ops land on.

    While active, ``leaky_relu``, ``max_pool2d`` and ``clamp01`` append a
    fingerprint (sign pattern, argmax indices, saturation mask). Two
    evaluations with equal fingerprints lie on the same smooth piece.
    """

    active: "KinkMonitor | None" = None

    def __init__(self):
        self.marks: list[Tensor] = []

    def __enter__(self) -> "KinkMonitor":
        self.marks = []
        KinkMonitor.active = self
        return self

    def __exit__(self, *exc) -> None:
        KinkMonitor.active = None

    @classmethod
    def observe(cls, mark: Tensor) -> None:
        if cls.active is not None:
            cls.active.marks.append(mark.detach().clone())


def max_pool2d(x: Tensor) -> Tensor:
    if KinkMonitor.active is not None:
        out, idx = F.max_pool2d(x, kernel_size=2, stride=2, return_indices=True)
        KinkMonitor.observe(idx)
        return out
    return F.max_pool2d(x, kernel_size=2, stride=2)


def leaky_relu(x: Tensor) -> Tensor:
    if KinkMonitor.active is not None:
        KinkMonitor.observe(x > 0)
    return F.leaky_relu(x, LEAKY_SLOPE)


def abs_(x: Tensor) -> Tensor:
    """|x|, reporting its sign pattern to an active KinkMonitor."""
    if KinkMonitor.active is not None:
        KinkMonitor.observe(torch.sign(x))
    return x.abs()


class LeakyReLU(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return leaky_relu(x)


def clamp01(x: Tensor) -> Tensor:
    if KinkMonitor.active is not None:
        KinkMonitor.observe((x < 0).to(torch.int8) - (x > 1).to(torch.int8))
    return x.clamp(0.0, 1.0)


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    return torch.cat(list(tensors), dim=1)


@dataclass
class AttentionCounter:
    """Instrumentation for attention calls: token counts, score shapes, MACs."""

    calls: list[dict] = field(default_factory=list)
    enabled: bool = False

    def record(self, batch: int, heads: int, queries: int, keys: int, channels: int) -> None:
        if not self.enabled:
            return
        macs = batch * (2 * queries * keys * channels)  # QK^T and AV
        self.calls.append({
            "query_tokens": queries,
            "key_tokens": keys,
            "score_shape": [batch, heads, queries, keys],
            "macs": macs,
        })

    def reset(self) -> None:
        self.calls.clear()


ATTENTION_COUNTER = AttentionCounter()


class counting_attention:
    """Context manager that enables the global attention counter."""

    def __enter__(self) -> AttentionCounter:
        ATTENTION_COUNTER.reset()
        ATTENTION_COUNTER.enabled = True
        return ATTENTION_COUNTER

    def __exit__(self, *exc) -> None:
        ATTENTION_COUNTER.enabled = False


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, heads: int,
                         w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor,
                         b_q: Tensor | None = None, b_k: Tensor | None = None,
                         b_v: Tensor | None = None, b_o: Tensor | None = None,
                         dropout_rate: float = 0.0, training: bool = False,
                         rng: RngStream | None = None, query_chunk: int | None = None) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads.

    query: [B, T, C]; key, value: [B, S, C]; projection weights are [C, C]
    applied as x @ w.T. Dropout masks attention weights (after softmax) and
    rescales by 1/(1-p), only when ``training``.
    """
    b, t, c = query.shape
    s = key.shape[1]
    if c % heads != 0:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    d = c // heads

    def split(x: Tensor) -> Tensor:
        return x.reshape(b, x.shape[1], heads, d).transpose(1, 2)

    q = split(F.linear(query, w_q, b_q))
    k = split(F.linear(key, w_k, b_k))
    v = split(F.linear(value, w_v, b_v))
    ATTENTION_COUNTER.record(b, heads, t, s, c)

    chunk = query_chunk or t
    outs = []
    for start in range(0, t, chunk):
        scores = q[:, :, start:start + chunk] @ k.transpose(-2, -1) / math.sqrt(d)
        weights = torch.softmax(scores, dim=-1)
        if training and dropout_rate > 0:
            draw = rng.uniform(*weights.shape, dtype=weights.dtype) if rng is not None \
                else torch.rand_like(weights)
            weights = weights * (draw >= dropout_rate).to(weights.dtype) / (1.0 - dropout_rate)
        outs.append(weights @ v)
    out = torch.cat(outs, dim=2).transpose(1, 2).reshape(b, t, c)
    return F.linear(out, w_o, b_o)


class MultiHeadAttention(nn.Module):
    def __init__(self, channels: int, heads: int = 4, dropout: float = 0.1):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.dropout = dropout
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, query: Tensor, key: Tensor, value: Tensor,
                rng: RngStream | None = None, query_chunk: int | None = None) -> Tensor:
        return multi_head_attention(
            query, key, value, self.heads,
            self.q.weight, self.k.weight, self.v.weight, self.out.weight,
            self.q.bias, self.k.bias, self.v.bias, self.out.bias,
            dropout_rate=self.dropout, training=self.training, rng=rng,
            query_chunk=query_chunk,
        )


class DoubleConv(nn.Sequential):
    """Two (3x3 conv, batch norm, LeakyReLU 0.2) units."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM),
            LeakyReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM),
            LeakyReLU(),
        )


def init_weights(module: nn.Module, rng: RngStream) -> None:
    """Kaiming fan-in init for convolutions and linears, zero biases, unit norms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, mode="fan_in",
                                    nonlinearity="leaky_relu", generator=rng.generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    passed: bool
    note: str = ""
    kink_crossings: int = 0
    probes: int = 0


def gradcheck(f: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-4,
              tol: float = 1e-3, max_elements: int | None = None,
              seed: int = 0, monitor: bool = False) -> list[GradcheckResult]:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    ``params`` maps names to leaf tensors (float64, requires_grad) that ``f``
    closes over. Per parameter the error is
    max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8).
    With ``max_elements`` only a seeded random subset of entries is probed.
    With ``monitor``, probes whose +h or -h evaluation lands on a different
    smooth piece than the base point (see KinkMonitor) are counted in
    ``kink_crossings`` and left out of the error: a central difference taken
    across a kink does not estimate the derivative.
    """
    for p in params.values():
        if p.grad is not None:
            p.grad = None

    def fingerprint_differs(base: list[Tensor], marks: list[Tensor]) -> bool:
        return len(base) != len(marks) or any(not torch.equal(a, b) for a, b in zip(base, marks))

    if monitor:
        with KinkMonitor() as km:
            value = f()
        base_marks = km.marks
    else:
        value = f()
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    results = []
    for (name, p), g in zip(params.items(), grads):
        analytic = torch.zeros_like(p) if g is None else g.detach()
        flat = p.detach().view(-1)
        n = flat.numel()
        idx = torch.arange(n) if max_elements is None or n <= max_elements \
            else torch.randperm(n, generator=gen)[:max_elements]
        a_sel = analytic.reshape(-1)[idx]
        numeric = torch.empty_like(a_sel)
        clean = torch.ones(len(idx), dtype=torch.bool)
        finite = True
        crossings = 0
        with torch.no_grad():
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                crossed = False
                values = []
                for x in (orig + h, orig - h):
                    flat[i] = x
                    if monitor:
                        with KinkMonitor() as km:
                            values.append(f().item())
                        crossed = crossed or fingerprint_differs(base_marks, km.marks)
                    else:
                        values.append(f().item())
                flat[i] = orig
                up, down = values
                crossings += crossed
                clean[j] = not crossed
                if not (math.isfinite(up) and math.isfinite(down)):
                    finite = False
                    break
                numeric[j] = (up - down) / (2 * h)
        if not finite:
            results.append(GradcheckResult(name, math.inf, False, "non-finite value at perturbed point",
                                           probes=len(idx)))
            continue
        if not clean.any():
            results.append(GradcheckResult(name, math.nan, False, "every probe crossed a kink",
                                           kink_crossings=crossings, probes=len(idx)))
            continue
        a_sel, numeric = a_sel[clean], numeric[clean]
        denom = max(a_sel.abs().max().item(), numeric.abs().max().item(), 1e-8)
        err = (a_sel - numeric).abs().max().item() / denom
        results.append(GradcheckResult(name, err, err <= tol, kink_crossings=crossings, probes=len(idx)))
    return results
