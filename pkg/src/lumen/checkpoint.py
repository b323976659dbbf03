"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LUMN"            magic
    u32                format version (1)
    u64                global step
    u64                RNG seed
    repeated until EOF:
        u32            name length in bytes
        bytes          UTF-8 name
        u8             dtype code (0 float32, 1 float64, 2 int64)
        u32            rank
        rank x u64     dims
        payload        little-endian values, row-major

Names are the model's state-dict keys (parameters and normalisation
buffers). Optimizer moments, when saved, use the reserved prefixes
``optim.m.`` and ``optim.v.`` followed by the parameter name.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LUMN"
VERSION = 1
OPTIM_PREFIXES = ("optim.m.", "optim.v.")

_CODES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8")}
_FROM_CODE = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8"), 2: (torch.int64, "<i8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    step: int
    seed: int
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(OPTIM_PREFIXES)}

    def optimizer_state(self) -> dict[str, dict[str, torch.Tensor]]:
        m = {k[len("optim.m."):]: v for k, v in self.tensors.items() if k.startswith("optim.m.")}
        v = {k[len("optim.v."):]: t for k, t in self.tensors.items() if k.startswith("optim.v.")}
        return {"m": m, "v": v}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    parts = [MAGIC, struct.pack("<IQQ", VERSION, ckpt.step, ckpt.seed & 0xFFFF_FFFF_FFFF_FFFF)]
    for name, t in ckpt.tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code, np_dtype = _CODES[t.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", code, t.dim()))
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        parts.append(t.numpy().astype(np_dtype, copy=False).tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a LUMN checkpoint")
    version, step, seed = struct.unpack_from("<IQQ", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 4 + 20
    tensors = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BI", data, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            dtype, np_dtype = _FROM_CODE[code]
            count = int(np.prod(dims)) if rank else 1
            width = np.dtype(np_dtype).itemsize
            arr = np.frombuffer(data, dtype=np_dtype, count=count, offset=pos).reshape(dims)
            pos += count * width
            tensors[name] = torch.from_numpy(arr.copy()).to(dtype)
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record at byte {pos}") from exc
    return Checkpoint(step, seed, tensors)


def model_to_checkpoint(model: torch.nn.Module, step: int = 0, seed: int = 0,
                        optimizer=None) -> Checkpoint:
    tensors = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if optimizer is not None:
        for name, (m, v) in optimizer.moments().items():
            tensors[f"optim.m.{name}"] = m.clone()
            tensors[f"optim.v.{name}"] = v.clone()
    return Checkpoint(step, seed, tensors)


def load_into(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model``; names and shapes must match exactly."""
    state = model.state_dict()
    saved = ckpt.model_state()
    unknown = [k for k in saved if k not in state]
    if unknown:
        raise CheckpointError(f"unknown parameter in checkpoint: {unknown[0]}")
    missing = [k for k in state if k not in saved]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter: {missing[0]}")
    for name, t in saved.items():
        if tuple(state[name].shape) != tuple(t.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: model {tuple(state[name].shape)}, checkpoint {tuple(t.shape)}"
            )
    with torch.no_grad():
        for name, t in saved.items():
            state[name].copy_(t)
