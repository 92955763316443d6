"""Skull extraction by HU thresholding and 3-D non-local-means denoising."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage as ndi

from .volume_core import LabelVolume, ScalarVolume, binary_volume

log = logging.getLogger(__name__)

# 7-point Laplacian: centre -6, six neighbours +1
_LAPLACE_NORM = np.sqrt(36.0 + 6.0)


class NoSkullError(ValueError):
    """No voxel reaches the bone threshold (non-CT or mis-scaled input)."""


@dataclass(frozen=True)
class SkullThreshold:
    min_hu: float = 250.0

    def __post_init__(self):
        if not np.isfinite(self.min_hu):
            raise ValueError("skull threshold must be finite")


@dataclass(frozen=True)
class DenoiseParams:
    patch_radius: int = 1
    search_radius: int = 3
    h: float = 15.0

    def __post_init__(self):
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")
        if self.search_radius < self.patch_radius:
            raise ValueError("search_radius must be >= patch_radius")
        if self.h < 0:
            raise ValueError("h must be >= 0")


def threshold_mask(volume: ScalarVolume, threshold: SkullThreshold = SkullThreshold()) -> np.ndarray:
    return volume.data >= threshold.min_hu


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 26-connected component; ties go to the lowest component label."""
    labels, n = ndi.label(mask, structure=ndi.generate_binary_structure(3, 3))
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def extract_skull(volume: ScalarVolume, threshold: SkullThreshold = SkullThreshold()) -> LabelVolume:
    """Binary skull mask: voxels >= ``min_hu``, largest 26-connected piece kept."""
    mask = threshold_mask(volume, threshold)
    if not mask.any():
        raise NoSkullError(
            f"no skull found: no voxel >= {threshold.min_hu} HU (max {float(volume.data.max()):.1f})"
        )
    return binary_volume(largest_component(mask), volume)


def fill_head(skull: np.ndarray) -> np.ndarray:
    """Solid head mask from a skull shell (holes filled)."""
    return ndi.binary_fill_holes(skull)


def estimate_noise_sigma(data: np.ndarray) -> float:
    """Robust noise level from the MAD of the Laplacian response.

    The Laplacian of white noise with std ``s`` has std ``s * sqrt(42)``, so
    the MAD estimate is divided by that factor.
    """
    lap = ndi.laplace(np.asarray(data, dtype=np.float64), mode="reflect")
    mad = np.median(np.abs(lap - np.median(lap)))
    return float(1.4826 * mad / _LAPLACE_NORM)


def _half_offsets(radius: int):
    """One representative of every +/- pair of non-zero offsets."""
    for off in itertools.product(range(-radius, radius + 1), repeat=3):
        if off > (0, 0, 0):
            yield off


def nlm_denoise(volume: ScalarVolume, params: DenoiseParams = DenoiseParams(),
                sigma: float | None = None, bbox=None) -> ScalarVolume:
    """Non-local means over a cubic search window.

    Each voxel becomes the weighted mean of the voxels in its search window
    with weights ``exp(-max(d2 - 2 sigma^2, 0) / h^2)``, ``d2`` being the mean
    squared difference between the two patches. ``h == 0`` returns the input.

    ``bbox`` (a tuple of three slices) restricts the work to a sub-block;
    voxels outside it are returned unchanged.
    """
    if params.h == 0:
        return volume
    if sigma is None:
        sigma = estimate_noise_sigma(volume.data)
    data = np.array(volume.data, dtype=np.float32)
    block = data if bbox is None else data[bbox]
    if block.size == 0:
        return volume
    out = _nlm_block(block, params.patch_radius, params.search_radius, params.h, sigma)
    if bbox is None:
        data = out
    else:
        data[bbox] = out
    return volume.with_data(data)


def _nlm_block(v: np.ndarray, pr: int, sr: int, h: float, sigma: float) -> np.ndarray:
    pad = sr + pr
    P = np.pad(v, pad, mode="reflect").astype(np.float32)
    offsets = np.array(list(_half_offsets(sr)), dtype=np.int64).reshape(-1, 3)
    return _nlm_kernel(P, np.array(v.shape, dtype=np.int64), pad, pr, offsets,
                       2.0 * sigma * sigma, 1.0 / (h * h))


@numba.njit(cache=True)
def _window_sum(a, axis, w):
    """Valid-mode running sum of ``w`` consecutive samples along ``axis``."""
    n0, n1, n2 = a.shape
    if axis == 0:
        out = np.zeros((n0 - w + 1, n1, n2), dtype=np.float32)
    elif axis == 1:
        out = np.zeros((n0, n1 - w + 1, n2), dtype=np.float32)
    else:
        out = np.zeros((n0, n1, n2 - w + 1), dtype=np.float32)
    m0, m1, m2 = out.shape
    for i in range(m0):
        for j in range(m1):
            for k in range(m2):
                acc = np.float32(0.0)
                for t in range(w):
                    if axis == 0:
                        acc += a[i + t, j, k]
                    elif axis == 1:
                        acc += a[i, j + t, k]
                    else:
                        acc += a[i, j, k + t]
                out[i, j, k] = acc
    return out


@numba.njit(cache=True)
def _nlm_kernel(P, core, pad, pr, offsets, bias, inv_h2):
    """NLM on the core of the padded block ``P``.

    Each +/- offset pair is visited once: the patch distance between voxels
    ``i`` and ``i + o`` is symmetric, so one weight updates both voxels.
    """
    num = np.zeros((core[0], core[1], core[2]))
    den = np.ones((core[0], core[1], core[2]))
    for x in range(core[0]):
        for y in range(core[1]):
            for z in range(core[2]):
                num[x, y, z] = P[pad + x, pad + y, pad + z]
    w = 2 * pr + 1
    n_patch = np.float32(w * w * w)
    for q in range(offsets.shape[0]):
        o0, o1, o2 = offsets[q, 0], offsets[q, 1], offsets[q, 2]
        # centres i with i or i + o in the core, plus patch margin
        lo0, lo1, lo2 = pad + min(0, -o0) - pr, pad + min(0, -o1) - pr, pad + min(0, -o2) - pr
        hi0 = pad + core[0] + max(0, -o0) + pr
        hi1 = pad + core[1] + max(0, -o1) + pr
        hi2 = pad + core[2] + max(0, -o2) + pr
        d = np.empty((hi0 - lo0, hi1 - lo1, hi2 - lo2), dtype=np.float32)
        for i in range(d.shape[0]):
            for j in range(d.shape[1]):
                for k in range(d.shape[2]):
                    diff = P[lo0 + i + o0, lo1 + j + o1, lo2 + k + o2] - P[lo0 + i, lo1 + j, lo2 + k]
                    d[i, j, k] = diff * diff
        s = _window_sum(_window_sum(_window_sum(d, 2, w), 1, w), 0, w)
        c0, c1, c2 = lo0 + pr - pad, lo1 + pr - pad, lo2 + pr - pad  # core coords of s[0, 0, 0]
        for i in range(s.shape[0]):
            x = c0 + i
            for j in range(s.shape[1]):
                y = c1 + j
                for k in range(s.shape[2]):
                    z = c2 + k
                    dist = s[i, j, k] / n_patch - bias
                    wt = np.exp(-max(dist, 0.0) * inv_h2)
                    if 0 <= x < core[0] and 0 <= y < core[1] and 0 <= z < core[2]:
                        num[x, y, z] += wt * P[pad + x + o0, pad + y + o1, pad + z + o2]
                        den[x, y, z] += wt
                    xo, yo, zo = x + o0, y + o1, z + o2
                    if 0 <= xo < core[0] and 0 <= yo < core[1] and 0 <= zo < core[2]:
                        num[xo, yo, zo] += wt * P[pad + x, pad + y, pad + z]
                        den[xo, yo, zo] += wt
    return (num / den).astype(np.float32)
