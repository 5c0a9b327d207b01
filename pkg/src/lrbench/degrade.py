"""Low-resolution simulation.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. Resizing
is separable cubic convolution with the Keys kernel (a = -0.5), half-pixel
centred coordinates and edge-clamped sampling.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

KEYS_A = -0.5


def keys_kernel(x, a: float = KEYS_A):
    """Keys cubic convolution kernel W(x)."""
    x = np.abs(np.asarray(x, dtype=float))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=256)
def resize_matrix(in_size: int, out_size: int, antialias: bool = False) -> np.ndarray:
    """(out_size, in_size) matrix that resamples one axis.

    With ``antialias`` the kernel is stretched by the downsampling factor,
    which low-pass filters before decimation. Without it, every output
    sample uses exactly four input taps.
    """
    scale = in_size / out_size
    stretch = scale if (antialias and scale > 1) else 1.0
    support = 2.0 * stretch
    m = np.zeros((out_size, in_size))
    for i in range(out_size):
        centre = (i + 0.5) * scale - 0.5
        j0 = int(np.floor(centre - support)) + 1
        taps = np.arange(j0, int(np.floor(centre + support)) + 1)
        w = keys_kernel((centre - taps) / stretch)
        if stretch != 1.0:
            w = w / w.sum()
        np.add.at(m[i], np.clip(taps, 0, in_size - 1), w)
    m.setflags(write=False)
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = False) -> np.ndarray:
    """Resize an (H, W, C) image and clamp the result to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.clip(img, 0.0, 1.0)
    mh = resize_matrix(h, out_h, antialias)
    mw = resize_matrix(w, out_w, antialias)
    out = np.tensordot(mh, img, axes=(1, 0))  # (out_h, w, c)
    out = np.tensordot(mw, out, axes=(1, 1)).transpose(1, 0, 2)
    return np.clip(out, 0.0, 1.0)


def resize_shorter(img: np.ndarray, size: int, antialias: bool = False) -> np.ndarray:
    """Resize so that the shorter side equals ``size``, keeping aspect."""
    h, w = img.shape[:2]
    if h <= w:
        return bicubic_resize(img, size, max(1, int(size * w / h)), antialias)
    return bicubic_resize(img, max(1, int(size * h / w)), size, antialias)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"cannot crop {size} from {h}x{w}")
    top = int(round((h - size) / 2.0))
    left = int(round((w - size) / 2.0))
    return img[top:top + size, left:left + size]


@dataclass(frozen=True)
class PreprocessSpec:
    low_res: int | None
    model_res: int
    normalize_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    normalize_std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    antialias: bool = False

    def __post_init__(self):
        if min(self.normalize_std) <= 0:
            raise ValueError("normalize_std must be strictly positive")
        if self.model_res < 1 or (self.low_res is not None and self.low_res < 1):
            raise ValueError("resolutions must be positive")


CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def degrade_pipeline(img: np.ndarray, spec: PreprocessSpec, normalize: bool = True) -> np.ndarray:
    """Downsample to ``low_res``, then apply the model preprocessing.

    Steps: shorter side to ``low_res``, shorter side to ``model_res``,
    centre crop ``model_res``, per-channel ``(x - mean) / std``. With
    ``low_res=None`` the first step is skipped, giving the HR input.
    """
    out = np.asarray(img, dtype=float)
    if spec.low_res is not None:
        out = resize_shorter(out, spec.low_res, spec.antialias)
    out = resize_shorter(out, spec.model_res, spec.antialias)
    out = center_crop(out, spec.model_res)
    if not normalize:
        return out
    mean = np.asarray(spec.normalize_mean)
    std = np.asarray(spec.normalize_std)
    return (out - mean) / std


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG or PPM file as RGB floats in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(float) / 255.0


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write RGB floats in [0, 1] as 8-bit PNG or PPM (by suffix)."""
    path = Path(path)
    arr = np.clip(np.rint(np.asarray(img, float) * 255.0), 0, 255).astype(np.uint8)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    PILImage.fromarray(arr).save(path, format=fmt)
