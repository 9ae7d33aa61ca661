"""Trimap labels, region masks, feature-resolution downsampling and alpha dilation.

A trimap is a uint8 array whose values are the 8-bit PNG codes themselves:
``B = 0``, ``U = 128``, ``F = 255``.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

B = 0
U = 128
F = 255
LABELS = (B, U, F)
REGION_NAMES = {"B": B, "U": U, "F": F}

TAU = 1e-6


def _label(region) -> int:
    if isinstance(region, str):
        return REGION_NAMES[region.upper()]
    if region not in LABELS:
        raise ValueError(f"unknown region {region!r}")
    return int(region)


def is_valid(trimap: np.ndarray) -> bool:
    return trimap.dtype == np.uint8 and bool(np.isin(trimap, LABELS).all())


def region_mask(trimap: np.ndarray, region) -> np.ndarray:
    return trimap == _label(region)


def from_gray(gray: np.ndarray) -> np.ndarray:
    """Decode an 8-bit grayscale trimap; any value in [1, 254] counts as U."""
    gray = np.asarray(gray)
    out = np.full(gray.shape, U, dtype=np.uint8)
    out[gray == 0] = B
    out[gray == 255] = F
    odd = (gray != 0) & (gray != 128) & (gray != 255)
    if odd.any():
        warnings.warn(f"trimap has {int(odd.sum())} pixels outside {{0, 128, 255}}; treating them as unknown")
    return out


def to_network(trimap: np.ndarray) -> np.ndarray:
    """Trimap as the fourth input channel: B=0, U=0.5, F=1."""
    return np.select([trimap == B, trimap == U], [0.0, 0.5], default=1.0).astype(np.float32)


def downsample_trimap(trimap: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour label at the centre of each ``stride`` x ``stride`` cell.

    Dimensions that are not multiples of ``stride`` are padded with B first.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return trimap.copy()
    h, w = trimap.shape
    oh, ow = -(-h // stride), -(-w // stride)
    padded = np.full((oh * stride, ow * stride), B, dtype=np.uint8)
    padded[:h, :w] = trimap
    c = stride // 2
    return padded[c::stride, c::stride].copy()


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    # out-of-image pixels count as members, so a full mask stays full
    if mask.all() or not mask.any():
        return mask.copy()
    return ndimage.distance_transform_edt(mask) > radius


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if not mask.any() or mask.all():
        return mask.copy()
    return ndimage.distance_transform_edt(~mask) <= radius


def dilate_alpha_to_trimap(alpha: np.ndarray, erode_radius: int, dilate_radius: int, tau: float = TAU) -> np.ndarray:
    """Synthesize a trimap from a ground-truth matte.

    Solid foreground and background are eroded by a disk of ``erode_radius``,
    the fractional region is dilated by a disk of ``dilate_radius``, and
    everything that is neither remaining F nor remaining B becomes U.
    """
    if erode_radius < 1 or dilate_radius < 1:
        raise ValueError("radii must be >= 1")
    alpha = np.asarray(alpha)
    fg = _erode(alpha >= 1 - tau, erode_radius)
    bg = _erode(alpha <= tau, erode_radius)
    soft = _dilate((alpha > tau) & (alpha < 1 - tau), dilate_radius)
    out = np.full(alpha.shape, U, dtype=np.uint8)
    out[fg & ~soft] = F
    out[bg & ~soft] = B
    return out


def random_trimap(alpha: np.ndarray, rng: np.random.Generator, max_radius: int = 25) -> np.ndarray:
    """Trimap with erode/dilate radii drawn uniformly from [1, max_radius]."""
    e, d = rng.integers(1, max_radius + 1, size=2)
    return dilate_alpha_to_trimap(alpha, int(e), int(d))


def trimap_alpha(trimap: np.ndarray) -> np.ndarray:
    """Alpha implied by the known regions: F -> 1, B and U -> 0."""
    return (trimap == F).astype(np.float64)
