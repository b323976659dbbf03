"""Procedural paired fixture: well-lit scenes, darkened copies, synthetic depth.

Each scene is a lit background ramp with a few coloured discs and boxes and a
mild sinusoidal texture. Depth grows with image row (floor receding) and
objects sit closer than the background. The low-light copy is
``gain * high ** 1.3`` plus Gaussian read noise, quantised to 8 bits.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _scene(rng: np.random.Generator, h: int, w: int):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    base = rng.uniform(0.35, 0.7, size=3)
    tilt = rng.uniform(-0.2, 0.2, size=3)
    img = base[None, None, :] + tilt[None, None, :] * (xx[..., None] - 0.5)
    freq = rng.uniform(4, 10)
    img += 0.05 * np.sin(2 * np.pi * freq * (xx + 0.5 * yy))[..., None]
    depth = 0.3 + 0.7 * (1.0 - yy)
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.1, 1.0, size=3)
        near = rng.uniform(0.05, 0.5)
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.08, 0.22)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.6, 1.4))
        img[mask] = color
        depth[mask] = near
    return np.clip(img, 0, 1), np.clip(depth, 0, 1)


def make_fixture(root, n_train: int = 8, n_test: int = 4, size: int = 64, seed: int = 2024) -> Path:
    """Write ``<root>/{train,test}/{low,high,depth}/NNN.png``; returns root."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("test", n_test)):
        for sub in ("low", "high", "depth"):
            (root / split / sub).mkdir(parents=True, exist_ok=True)
        for i in range(n):
            high, depth = _scene(rng, size, size)
            gain = rng.uniform(0.18, 0.3)
            low = gain * high ** 1.3 + rng.normal(0, 0.01, size=high.shape)
            stem = f"{i:03d}"
            Image.fromarray(np.rint(np.clip(high, 0, 1) * 255).astype(np.uint8), "RGB").save(
                root / split / "high" / f"{stem}.png")
            Image.fromarray(np.rint(np.clip(low, 0, 1) * 255).astype(np.uint8), "RGB").save(
                root / split / "low" / f"{stem}.png")
            Image.fromarray(np.rint(depth * 65535).astype(np.uint16)).save(
                root / split / "depth" / f"{stem}.png")
    return root
