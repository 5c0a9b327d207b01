"""Procedural stand-in images for toy training runs."""
from __future__ import annotations

import numpy as np


def procedural_images(count: int, size: int = 224, seed: int = 0) -> np.ndarray:
    """Random compositions of coloured shapes, stripes and gradients.

    Stand-in for generated photographs: plenty of edges and texture at
    several spatial frequencies so that downsampling actually loses detail.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((count, size, size, 3))
    for i in range(count):
        c0, c1 = rng.random(3), rng.random(3)
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1) / 2
        img = c0 + (c1 - c0) * ramp[..., None]
        for _ in range(rng.integers(4, 9)):
            kind = rng.integers(0, 4)
            color = rng.random(3)
            cx, cy = rng.random(2)
            r = rng.uniform(0.05, 0.3)
            if kind == 0:
                mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
            elif kind == 1:
                w, h = rng.uniform(0.05, 0.4, 2)
                mask = (np.abs(xx - cx) < w) & (np.abs(yy - cy) < h)
            elif kind == 2:
                freq = rng.uniform(8, 40)
                theta = rng.uniform(0, np.pi)
                phase = np.cos(theta) * xx + np.sin(theta) * yy
                stripes = np.sin(2 * np.pi * freq * phase) > 0
                mask = stripes & ((xx - cx) ** 2 + (yy - cy) ** 2 < (1.5 * r) ** 2)
            else:
                freq = rng.uniform(10, 30)
                mask = ((np.floor(xx * freq) + np.floor(yy * freq)) % 2 == 0)
                mask &= (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r)
            img[mask] = color
        out[i] = np.clip(img, 0, 1)
    return out
