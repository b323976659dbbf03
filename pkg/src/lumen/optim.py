"""AdamW with decoupled weight decay and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import torch


def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-4, lr_min: float = 1e-6) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Keyed by parameter name so state maps one-to-one onto checkpoint records."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = dict(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def moments(self) -> dict:
        return {n: (self.m[n], self.v[n]) for n in self.params}

    def load_moments(self, m: dict, v: dict, step: int) -> None:
        for n in self.params:
            if n not in m or n not in v:
                raise KeyError(f"optimizer state missing for {n}")
            self.m[n].copy_(m[n])
            self.v[n].copy_(v[n])
        self.t = step

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = torch.zeros_like(p)
            elif not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            if self.weight_decay:
                p.mul_(1.0 - lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / c1)


def adamw_step(params: dict, grads: dict, state: dict, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 1e-4) -> tuple[dict, dict]:
    """Pure-function form: returns (new_params, new_state) without mutating inputs.

    ``state`` holds "t", "m" and "v" (the latter two keyed like ``params``);
    an empty dict starts from zero moments.
    """
    b1, b2 = betas
    t = state.get("t", 0) + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        m = b1 * state.get("m", {}).get(name, torch.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.get("v", {}).get(name, torch.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p * (1 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + eps)
        m_out[name], v_out[name] = m, v
    return new_params, {"t": t, "m": m_out, "v": v_out}
