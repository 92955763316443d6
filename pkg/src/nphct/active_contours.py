"""3-D morphological Chan-Vese (MCV) and geodesic active contours (MGAC).

Both evolve a binary mask with morphological operators instead of a PDE:
a data/attachment step flips boundary voxels, and alternating SI∘IS / IS∘SI
passes approximate mean-curvature smoothing.

The curvature operators use the nine 3x3 planes through a voxel: the three
axis-aligned planes and the six diagonal planes that contain one axis. Each
planar erosion/dilation is computed separably as two 3-voxel line passes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage as ndi

from .volume_core import LabelVolume, ScalarVolume, as_array, binary_volume

log = logging.getLogger(__name__)

STABLE_ITERATIONS = 3

_X, _Y, _Z = (1, 0, 0), (0, 1, 0), (0, 0, 1)
# (first pass direction, second pass direction) for each of the nine planes
_PLANES = (
    (_X, _Y), (_X, _Z), (_Y, _Z),
    (_Z, (1, 1, 0)), (_Z, (1, -1, 0)),
    (_Y, (1, 0, 1)), (_Y, (1, 0, -1)),
    (_X, (0, 1, 1)), (_X, (0, 1, -1)),
)


class DegenerateContourError(RuntimeError):
    """The contour (or its complement) became empty."""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")


@dataclass(frozen=True)
class McvParams:
    lambda1: float = 1.0
    lambda2: float = 1.0
    smoothing_passes: int = 1
    balloon: float = 0.0
    iterations: int = 150
    means_in_domain: bool = False

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("lambda1 and lambda2 must be > 0")
        if self.smoothing_passes < 0:
            raise ValueError("smoothing_passes must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class MgacParams:
    edge_sigma: float = 2.0
    alpha: float = 100.0
    balloon: float = 1.0
    # a unit step blurred at edge_sigma bottoms out near 0.45; flat regions sit at 1
    threshold: float = 0.6
    iterations: int = 150
    smoothing_passes: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.smoothing_passes < 0:
            raise ValueError("smoothing_passes must be >= 0")


@dataclass
class EvolvingMask:
    """Binary contour interior plus an optional region it may not leave."""

    u: LabelVolume
    masked_domain: LabelVolume | None = None

    def __post_init__(self):
        if self.masked_domain is not None:
            if not self.masked_domain.geometry.same_as(self.u.geometry):
                raise ValueError("mask and domain geometries differ")
            if np.any((self.u.data > 0) & (self.masked_domain.data == 0)):
                raise ValueError("initial mask extends outside the masked domain")


# ----------------------------------------------------------- morphology


def _shift_views(p: np.ndarray, d):
    """Views of the 1-padded array ``p`` shifted by +d and -d, cropped to the core."""
    n = p.shape
    plus = tuple(slice(1 + k, n[i] - 1 + k) for i, k in enumerate(d))
    minus = tuple(slice(1 - k, n[i] - 1 - k) for i, k in enumerate(d))
    return p[plus], p[minus]


def _line(u: np.ndarray, d, op) -> np.ndarray:
    p = np.pad(u, 1)  # out-of-grid voxels count as 0
    a, b = _shift_views(p, d)
    return op(op(u, a), b)


def _planar(u: np.ndarray, op) -> list:
    first = {}
    out = []
    for d1, d2 in _PLANES:
        if d1 not in first:
            first[d1] = _line(u, d1, op)
        out.append(_line(first[d1], d2, op))
    return out


def sup_inf(u: np.ndarray) -> np.ndarray:
    """SI: 1 where some plane through the voxel is entirely 1."""
    parts = _planar(u, np.logical_and)
    out = parts[0]
    for p in parts[1:]:
        out |= p
    return out


def inf_sup(u: np.ndarray) -> np.ndarray:
    """IS: 1 where every plane through the voxel touches a 1."""
    parts = _planar(u, np.logical_or)
    out = parts[0]
    for p in parts[1:]:
        out &= p
    return out


class _Curvature:
    """Alternates SI∘IS and IS∘SI on successive calls."""

    def __init__(self):
        self.flip = False

    def __call__(self, u: np.ndarray) -> np.ndarray:
        self.flip = not self.flip
        return sup_inf(inf_sup(u)) if self.flip else inf_sup(sup_inf(u))


def boundary(u: np.ndarray) -> np.ndarray:
    """Voxels where the central-difference gradient of ``u`` is non-zero."""
    p = np.pad(u.astype(np.int8), 1, mode="edge")
    out = np.zeros(u.shape, dtype=bool)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        out |= p[tuple(lo)] != p[tuple(hi)]
    return out


_CUBE = np.ones((3, 3, 3), dtype=bool)


# ----------------------------------------------------------- region means


def region_means(image, mask, domain=None):
    """Mean intensity inside (c1) and outside (c2) the mask, optionally within a domain."""
    img = as_array(image)
    m = as_array(mask).astype(bool)
    if img.shape != m.shape:
        raise ValueError("image and mask shapes differ")
    if domain is not None:
        dom = as_array(domain).astype(bool)
        inside, outside = m & dom, ~m & dom
    else:
        inside, outside = m, ~m
    n_in, n_out = np.count_nonzero(inside), np.count_nonzero(outside)
    if n_in == 0 or n_out == 0:
        raise DegenerateContourError("degenerate contour: empty inside or outside region")
    img64 = img.astype(np.float64)
    return float(img64[inside].sum() / n_in), float(img64[outside].sum() / n_out)


def chan_vese_energy(image, mask, params: McvParams = McvParams(), spacing=(1.0, 1.0, 1.0)) -> float:
    """Chan-Vese energy of a binary partition (diagnostic only).

    Area counts exposed voxel faces; volume is in voxels times spacing.
    """
    img = as_array(image).astype(np.float64)
    m = as_array(mask).astype(bool)
    c1, c2 = region_means(img, m)
    sx, sy, sz = spacing
    face = (sy * sz, sx * sz, sx * sy)
    area = 0.0
    for axis in range(3):
        p = np.pad(m, [(1, 1) if a == axis else (0, 0) for a in range(3)])
        area += np.count_nonzero(np.diff(p.astype(np.int8), axis=axis)) * face[axis]
    vol = np.count_nonzero(m) * sx * sy * sz
    data = params.lambda1 * ((img[m] - c1) ** 2).sum() + params.lambda2 * ((img[~m] - c2) ** 2).sum()
    return float(params.smoothing_passes * area + params.balloon * vol + data)


# -------------------------------------------------------------- evolution


def _crop_box(domain: np.ndarray | None, shape, margin: int = 2):
    if domain is None:
        return tuple(slice(0, s) for s in shape)
    sl = ndi.find_objects(domain.astype(np.uint8))
    if not sl or sl[0] is None:
        return tuple(slice(0, s) for s in shape)
    return tuple(slice(max(0, s.start - margin), min(n, s.stop + margin)) for s, n in zip(sl[0], shape))


def _prepare(image: ScalarVolume, seed: EvolvingMask):
    if not image.geometry.same_as(seed.u.geometry):
        raise ValueError("image and seed geometries differ")
    u0 = seed.u.data > 0
    if not u0.any():
        raise DegenerateContourError("seed mask is empty")
    dom = None if seed.masked_domain is None else seed.masked_domain.data > 0
    return u0, dom


def _evolve(u0, dom, n_iter, step: Callable, smoothing_passes: int, iter_callback=None):
    box = _crop_box(dom, u0.shape)
    u = u0[box].copy()
    d = None if dom is None else dom[box]
    curv = _Curvature()
    stable = 0
    prev = None
    for it in range(n_iter):
        # the alternating smoothing pair settles into a 2-cycle as often as a fixed point
        prev2, prev = prev, u
        u = step(u, box)
        for _ in range(smoothing_passes):
            u = curv(u)
        if d is not None:
            u &= d
        if not u.any():
            raise DegenerateContourError("contour collapsed to an empty mask", it)
        if iter_callback is not None:
            iter_callback(it, u)
        if np.array_equal(u, prev) or (prev2 is not None and np.array_equal(u, prev2)):
            stable += 1
            if stable >= STABLE_ITERATIONS:
                log.debug("converged after %d iterations", it + 1)
                break
        else:
            stable = 0
    out = np.zeros(u0.shape, dtype=bool)
    out[box] = u
    return out


def mcv_evolve(image: ScalarVolume, seed: EvolvingMask, params: McvParams = McvParams(),
               iter_callback=None) -> LabelVolume:
    """Morphological Chan-Vese evolution from ``seed``.

    Region means span the whole image unless ``params.means_in_domain``; the
    domain (when given) only bounds where the contour may go. A constant
    image (``c1 == c2``) returns the seed unchanged.
    """
    u0, dom = _prepare(image, seed)
    img = image.data
    if params.means_in_domain and dom is not None:
        mean_domain = dom
    else:
        mean_domain = None
    c1, c2 = region_means(img, u0, mean_domain)
    if abs(c1 - c2) <= 1e-12 * max(1.0, abs(c1), abs(c2)):
        return binary_volume(u0, image)

    img64 = img.astype(np.float64)
    if mean_domain is None:
        total_sum, total_n = float(img64.sum()), img64.size
    else:
        total_sum, total_n = float(img64[mean_domain].sum()), int(np.count_nonzero(mean_domain))
    n_steps = max(1, int(round(abs(params.balloon)))) if params.balloon != 0 else 0

    def step(u, box):
        # the contour never leaves the crop box, so outside sums are fixed
        I = img64[box]
        inside = u if mean_domain is None else u & mean_domain[box]
        n_in = int(np.count_nonzero(inside))
        if n_in == 0 or n_in == total_n:
            raise DegenerateContourError("degenerate contour: empty inside or outside region")
        s_in = float(I[inside].sum())
        c1 = s_in / n_in
        c2 = (total_sum - s_in) / (total_n - n_in)
        d_in = params.lambda1 * (I - c1) ** 2
        d_out = params.lambda2 * (I - c2) ** 2
        for _ in range(n_steps):
            if params.balloon > 0:
                u = u | (ndi.binary_dilation(u, _CUBE) & (d_in <= d_out))
            else:
                u = u & ~(~ndi.binary_erosion(u, _CUBE, border_value=0) & (d_in >= d_out))
        edge = boundary(u)
        u = u.copy()
        u[edge & (d_in < d_out)] = True
        u[edge & (d_in > d_out)] = False
        return u

    out = _evolve(u0, dom, params.iterations, step, params.smoothing_passes, iter_callback)
    return binary_volume(out, image)


def edge_map(image, sigma: float = 2.0, alpha: float = 100.0) -> np.ndarray:
    """Inverse-gradient edge indicator on the min-max normalised image."""
    img = as_array(image).astype(np.float64)
    lo, hi = img.min(), img.max()
    norm = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    grad = ndi.gaussian_gradient_magnitude(norm, sigma, mode="nearest")
    return 1.0 / np.sqrt(1.0 + alpha * grad ** 2)


def mgac_evolve(image: ScalarVolume, seed: EvolvingMask, params: MgacParams = MgacParams(),
                iter_callback=None) -> LabelVolume:
    """Morphological geodesic active contour with a balloon force."""
    u0, dom = _prepare(image, seed)
    g = edge_map(image, params.edge_sigma, params.alpha)
    dg = np.gradient(g)
    balloon_ok = g > params.threshold if params.balloon != 0 else np.zeros_like(g, dtype=bool)

    def step(u, box):
        if params.balloon > 0:
            u = np.where(balloon_ok[box], ndi.binary_dilation(u, _CUBE), u)
        elif params.balloon < 0:
            u = np.where(balloon_ok[box], ndi.binary_erosion(u, _CUBE, border_value=0), u)
        du = np.gradient(u.astype(np.float32))
        aux = sum(a * b[box] for a, b in zip(du, dg))
        u = u.copy()
        u[aux > 0] = True
        u[aux < 0] = False
        return u

    out = _evolve(u0, dom, params.iterations, step, params.smoothing_passes, iter_callback)
    return binary_volume(out, image)


def sphere_mask(geometry, center_mm, radius_mm: float) -> np.ndarray:
    """Voxels whose centres lie within ``radius_mm`` of ``center_mm``."""
    idx = np.indices(geometry.dims, dtype=np.float64).reshape(3, -1).T
    pts = geometry.pose.apply(idx)
    d2 = ((pts - np.asarray(center_mm)) ** 2).sum(axis=1)
    return (d2 <= radius_mm ** 2).reshape(geometry.dims)
