"""Colour constancy, a morphological hair-removal baseline, and resizing.

Images are float arrays of shape (H, W, 3) with values in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class DegenerateChannelError(ValueError):
    pass


class InpaintError(ValueError):
    pass


@dataclass(frozen=True)
class ColorGains:
    r: float
    g: float
    b: float
    k: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.g, self.b])


def _channels(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H×W×3 image, got shape {img.shape}")
    return img


def max_rgb_gains(image: np.ndarray, k: float = 1.0) -> ColorGains:
    img = _channels(image)
    maxima = img.reshape(-1, 3).max(axis=0)
    if np.any(maxima <= 0):
        raise DegenerateChannelError(f"channel maxima {maxima.tolist()} leave a gain undefined")
    g = k / maxima
    return ColorGains(float(g[0]), float(g[1]), float(g[2]), k)


def max_rgb(image: np.ndarray, k: float = 1.0) -> np.ndarray:
    """White-patch correction: scale every channel so its maximum becomes ``k``.

    The brightest pixel of each channel is written as exactly ``k``, which
    makes the correction idempotent bit for bit.
    """
    if not 0 < k <= 1:
        raise ValueError(f"k must lie in (0, 1], got {k}")
    img = _channels(image)
    gains = max_rgb_gains(img, k).as_array()
    out = np.minimum(img * gains, k)
    out[img == img.reshape(-1, 3).max(axis=0)] = k
    return np.clip(out, 0.0, 1.0)


def shades_of_gray_gains(image: np.ndarray, p: float = 6.0, k: float = 1.0) -> ColorGains:
    if p < 1:
        raise ValueError(f"Minkowski order must be >= 1, got {p}")
    img = _channels(image).reshape(-1, 3)
    # factor out the channel max so large p does not underflow
    top = img.max(axis=0)
    if np.any(top <= 0):
        raise DegenerateChannelError(f"channel maxima {top.tolist()} leave a gain undefined")
    norm = top * np.mean((img / top) ** p, axis=0) ** (1.0 / p)
    g = k / norm
    return ColorGains(float(g[0]), float(g[1]), float(g[2]), k)


def shades_of_gray(image: np.ndarray, p: float = 6.0, k: float = 1.0) -> np.ndarray:
    """Minkowski-norm illuminant estimate; ``p=1`` is gray-world, ``p->inf`` is Max-RGB."""
    img = _channels(image)
    gains = shades_of_gray_gains(img, p, k).as_array()
    return np.clip(img * gains, 0.0, 1.0)


def gray_world(image: np.ndarray, k: float = 1.0) -> np.ndarray:
    return shades_of_gray(image, p=1.0, k=k)


def luminance(image: np.ndarray) -> np.ndarray:
    return _channels(image) @ np.array([0.299, 0.587, 0.114])


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (xx * xx + yy * yy) <= radius * radius


def hair_mask(image: np.ndarray, kernel_radius: int = 2, threshold: float = 0.1) -> np.ndarray:
    """Black-hat (closing minus image) response on luminance, thresholded."""
    if kernel_radius < 1:
        raise ValueError(f"kernel_radius must be >= 1, got {kernel_radius}")
    lum = luminance(image)
    closed = ndimage.grey_closing(lum, footprint=_disk(kernel_radius), mode="nearest")
    return (closed - lum) > threshold


def morph_hair_removal(image: np.ndarray, kernel_radius: int = 2, threshold: float = 0.1) -> np.ndarray:
    """Detect thin dark structures and fill them from nearby unmasked pixels.

    Masked pixels take the mean of unmasked pixels inside a square window of
    the given radius; pixels with no such neighbour are filled in later
    sweeps once their neighbours have been filled.
    """
    img = _channels(image)
    mask = hair_mask(img, kernel_radius, threshold)
    if not mask.any():
        return img.copy()
    if mask.all():
        raise InpaintError("hair mask covers the whole image; nothing to inpaint from")
    out = img.copy()
    known = ~mask
    size = 2 * kernel_radius + 1
    while not known.all():
        w = known.astype(np.float64)
        count = ndimage.uniform_filter(w, size=size, mode="constant") * size * size
        fill = (~known) & (count > 0.5)
        for c in range(3):
            total = ndimage.uniform_filter(out[..., c] * w, size=size, mode="constant") * size * size
            out[..., c] = np.where(fill, total / np.maximum(count, 1e-12), out[..., c])
        known = known | fill
    return np.clip(out, 0.0, 1.0)


def resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize using pixel-centre alignment."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h}×{target_w}")
    img = _channels(image)
    h, w, _ = img.shape
    if (h, w) == (target_h, target_w):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(h, target_h)
    x0, x1, fx = coords(w, target_w)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.clip(out, 0.0, 1.0)
