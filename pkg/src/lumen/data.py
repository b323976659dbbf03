"""Paired low/high dataset in the LOL directory layout.

    <root>/<split>/low/<stem>.png
    <root>/<split>/high/<stem>.png
    <root>/<split>/depth/<stem>.png   (16-bit pseudo-depth, optional)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .diffcore import RngStream
from .imaging import load_depth, load_image

Tensor = torch.Tensor


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    stem: str
    low: Path
    high: Path
    depth: Path | None


@dataclass
class DatasetIndex:
    root: Path
    split: str
    records: list[Record]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def has_depth(self) -> bool:
        return all(r.depth is not None for r in self.records)


def load_dataset(root, split: str, require_depth: bool = False) -> DatasetIndex:
    base = Path(root) / split
    low_dir, high_dir, depth_dir = base / "low", base / "high", base / "depth"
    if not low_dir.is_dir() or not high_dir.is_dir():
        raise DatasetError(f"{base} must contain low/ and high/ directories")
    lows = {p.stem: p for p in low_dir.glob("*.png")}
    highs = {p.stem: p for p in high_dir.glob("*.png")}
    depths = {p.stem: p for p in depth_dir.glob("*.png")} if depth_dir.is_dir() else {}
    problems = [f"{s}: missing high image" for s in sorted(lows.keys() - highs.keys())]
    problems += [f"{s}: missing low image" for s in sorted(highs.keys() - lows.keys())]
    if require_depth:
        problems += [f"{s}: missing depth map" for s in sorted(lows.keys() - depths.keys())]
    if problems:
        raise DatasetError(f"dataset {base} is inconsistent:\n  " + "\n  ".join(problems))
    stems = sorted(lows.keys() & highs.keys())
    if not stems:
        raise DatasetError(f"dataset {base} has no image pairs")
    records = [Record(s, lows[s], highs[s], depths.get(s)) for s in stems]
    return DatasetIndex(Path(root), split, records)


def normalize_depth(depth: Tensor) -> Tensor:
    """Per-image min-max normalisation to [0, 1]; a flat map becomes zeros."""
    lo, hi = depth.min(), depth.max()
    if hi - lo <= 0:
        return torch.zeros_like(depth)
    return (depth - lo) / (hi - lo)


@dataclass
class Sample:
    stem: str
    low: Tensor
    high: Tensor
    depth: Tensor | None


def load_samples(index: DatasetIndex) -> list[Sample]:
    out = []
    for r in index.records:
        low, high = load_image(r.low), load_image(r.high)
        if low.shape != high.shape:
            raise DatasetError(f"{r.stem}: low {tuple(low.shape)} and high {tuple(high.shape)} differ")
        depth = None
        if r.depth is not None:
            depth = normalize_depth(load_depth(r.depth))
            if depth.shape[-2:] != low.shape[-2:]:
                raise DatasetError(f"{r.stem}: depth size {tuple(depth.shape[-2:])} differs from image")
        out.append(Sample(r.stem, low, high, depth))
    return out


def _resize(t: Tensor, size: int) -> Tensor:
    if t.shape[-2:] == (size, size):
        return t
    return F.interpolate(t.unsqueeze(0), size=(size, size), mode="bilinear",
                         align_corners=False, antialias=True).squeeze(0).clamp(0, 1)


def prepare(sample: Sample, size: int, mode: str, rng: RngStream | None = None):
    """Return (low, high, depth) at size x size, by resize or aligned random crop."""
    tensors = [sample.low, sample.high] + ([sample.depth] if sample.depth is not None else [])
    h, w = sample.low.shape[-2:]
    if mode == "resize" or h < size or w < size:
        tensors = [_resize(t, size) for t in tensors]
    else:
        top = rng.randint(h - size + 1) if rng is not None else (h - size) // 2
        left = rng.randint(w - size + 1) if rng is not None else (w - size) // 2
        tensors = [t[:, top:top + size, left:left + size] for t in tensors]
    depth = tensors[2] if sample.depth is not None else None
    return tensors[0], tensors[1], depth
