"""Affine registration of a subject skull mask onto a template head mask.

The cost is ``1 - Dice`` between the transformed (filled) subject mask and the
template head mask, minimised coarse-to-fine by a cyclic coordinate search
with golden-section line searches over 12 parameters.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage as ndi

from .preprocess import fill_head
from .volume_core import (
    AffineTransform,
    Geometry,
    LabelVolume,
    VolumeIOError,
    binary_volume,
    load_labels,
    resample,
    save_volume,
)

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
N_GOLDEN = 12  # interval reductions per line search
MIN_DICE = 0.5
DERIVED_SKULL_MM = 6.0  # band thickness when a template ships no skull mask

# parameter layout: translation (mm), rotation (rad), log-scale, shear
N_PARAMS = 12
_BRACKETS = np.array([4.0] * 3 + [math.radians(4.0)] * 3 + [0.04] * 3 + [0.03] * 3)
_MIN_BRACKETS = np.array([0.05] * 3 + [math.radians(0.05)] * 3 + [5e-4] * 3 + [5e-4] * 3)


class RegistrationError(RuntimeError):
    """Registration converged to an unusable overlap."""

    def __init__(self, dice: float, message: str | None = None):
        self.dice = float(dice)
        super().__init__(message or f"registration failed: final Dice {self.dice:.3f} < {MIN_DICE}")


@dataclass(frozen=True)
class RegistrationParams:
    pyramid_levels: int = 3
    max_iters_per_level: int = 200
    convergence_tol: float = 1e-5
    max_points: int = 200000

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.max_iters_per_level < 1:
            raise ValueError("max_iters_per_level must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be > 0")

    @property
    def dof(self) -> int:
        return N_PARAMS


@dataclass
class TemplateSpace:
    """Reference grid, solid head mask, optional skull mask and seed spec."""

    geometry: Geometry
    head_mask: LabelVolume
    seed_spec: dict = field(default_factory=dict)
    seed_spec_path: str | None = None
    skull_mask: LabelVolume | None = None

    def __post_init__(self):
        if not self.head_mask.geometry.same_as(self.geometry):
            raise ValueError("template head mask geometry differs from the declared geometry")
        if not self.head_mask.data.any():
            raise ValueError("template head mask is empty")
        if self.skull_mask is not None:
            if not self.skull_mask.geometry.same_as(self.geometry):
                raise ValueError("template skull mask geometry differs from the declared geometry")
            if not self.skull_mask.data.any():
                raise ValueError("template skull mask is empty")

    def skull(self) -> np.ndarray:
        """Skull to register against; without a stored mask, the outer band of the head."""
        if self.skull_mask is not None:
            return self.skull_mask.data > 0
        head = self.head_mask.data > 0
        depth = max(1, int(round(DERIVED_SKULL_MM / min(self.geometry.spacing))))
        return head & ~ndi.binary_erosion(head, iterations=depth, border_value=0)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_volume(self.head_mask, directory / "head_mask.nii.gz")
        seed_name = self.seed_spec_path or "seeds.json"
        (directory / seed_name).write_text(json.dumps(self.seed_spec, indent=2))
        meta = {"geometry": self.geometry.to_dict(), "head_mask": "head_mask.nii.gz",
                "seed_spec": seed_name}
        if self.skull_mask is not None:
            save_volume(self.skull_mask, directory / "skull_mask.nii.gz")
            meta["skull_mask"] = "skull_mask.nii.gz"
        (directory / "template.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "TemplateSpace":
        directory = Path(directory)
        meta_path = directory / "template.json"
        if not meta_path.is_file():
            raise VolumeIOError(f"template directory {directory} has no template.json")
        meta = json.loads(meta_path.read_text())
        geometry = Geometry.from_dict(meta["geometry"])
        mask = load_labels(directory / meta.get("head_mask", "head_mask.nii.gz"), n_labels=2)
        skull = None
        if meta.get("skull_mask"):
            skull = load_labels(directory / meta["skull_mask"], n_labels=2)
        seed_name = meta.get("seed_spec")
        seeds = {}
        if seed_name:
            seed_path = directory / seed_name
            if not seed_path.is_file():
                raise VolumeIOError(f"seed spec {seed_path} not found")
            seeds = json.loads(seed_path.read_text())
        return cls(geometry, mask, seeds, seed_name, skull)


# ------------------------------------------------------------------ parameters


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def params_to_affine(p, source_center, target_center) -> AffineTransform:
    """``x -> R U (x - source_center) + target_center + t`` with ``U = expm(sym)``.

    ``sym`` holds the log-scales on its diagonal and the shears off it. A
    symmetric stretch keeps rotation and shear from trading against each
    other, so ``R`` is the polar rotation of the linear part.
    """
    p = np.asarray(p, dtype=np.float64)
    R = rotation_matrix(*p[3:6])
    sym = np.diag(p[6:9])
    sym[0, 1] = sym[1, 0] = p[9]
    sym[0, 2] = sym[2, 0] = p[10]
    sym[1, 2] = sym[2, 1] = p[11]
    w, v = np.linalg.eigh(sym)
    L = R @ (v * np.exp(w)) @ v.T
    t = np.asarray(target_center) + p[:3] - L @ np.asarray(source_center)
    return AffineTransform.from_linear(L, t)


def rotation_angle_deg(linear: np.ndarray) -> float:
    """Angle of the rotation factor of ``linear`` (polar decomposition)."""
    u, _, vt = np.linalg.svd(linear)
    R = u @ vt
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return math.degrees(math.acos(c))


# ------------------------------------------------------------------------ cost


def _mask_stats(mask: np.ndarray, geometry: Geometry):
    idx = np.argwhere(mask)
    pts = geometry.pose.apply(idx)
    centroid = pts.mean(axis=0)
    # a flat mask has no spread along its normal; floor at one voxel
    std = np.maximum(pts.std(axis=0), min(geometry.spacing))
    return centroid, std


def _downsample(mask: np.ndarray, geometry: Geometry, factor: int):
    """Block-mean downsampling; returns fractional occupancy and its voxel->mm pose."""
    m = mask.astype(np.float32)
    if factor == 1:
        return m, geometry.pose
    m = ndi.uniform_filter(m, size=factor, mode="constant")
    start = factor // 2  # window of output `start` spans input indices 0..factor-1
    m = m[start::factor, start::factor, start::factor]
    scale = np.eye(4)
    scale[:3, :3] *= factor
    scale[:3, 3] = (factor - 1) / 2.0
    return m, AffineTransform(geometry.pose.matrix @ scale)


@numba.njit(cache=True)
def _trilinear_sum(vol, m, points):
    """Sum of trilinear samples of ``vol`` at ``m @ p`` (zero outside the grid)."""
    n0, n1, n2 = vol.shape
    total = 0.0
    for k in range(points.shape[0]):
        px, py, pz = points[k, 0], points[k, 1], points[k, 2]
        x = m[0, 0] * px + m[0, 1] * py + m[0, 2] * pz + m[0, 3]
        y = m[1, 0] * px + m[1, 1] * py + m[1, 2] * pz + m[1, 3]
        z = m[2, 0] * px + m[2, 1] * py + m[2, 2] * pz + m[2, 3]
        if x <= -1.0 or y <= -1.0 or z <= -1.0 or x >= n0 or y >= n1 or z >= n2:
            continue
        i, j, l = int(np.floor(x)), int(np.floor(y)), int(np.floor(z))
        fx, fy, fz = x - i, y - j, z - l
        for di in range(2):
            ii = i + di
            if ii < 0 or ii >= n0:
                continue
            wx = fx if di else 1.0 - fx
            for dj in range(2):
                jj = j + dj
                if jj < 0 or jj >= n1:
                    continue
                wy = fy if dj else 1.0 - fy
                for dl in range(2):
                    ll = l + dl
                    if ll < 0 or ll >= n2:
                        continue
                    wz = fz if dl else 1.0 - fz
                    total += wx * wy * wz * vol[ii, jj, ll]
    return total


class _OverlapCost:
    """Soft Dice between the subject occupancy and the template head mask.

    Template points come from the binary full-resolution mask, jittered
    inside their voxels; only the subject side is block-averaged. Blurred
    or lattice-aligned samples on both sides would favour solutions whose
    voxel grids line up, biasing the search against rotations.
    """

    def __init__(self, subject: np.ndarray, subject_geom: Geometry, template: np.ndarray,
                 template_geom: Geometry, factor: int, max_points: int, rng: np.random.Generator):
        self.sub, sub_pose = _downsample(subject, subject_geom, factor)
        self.sub = self.sub.astype(np.float64)
        self.sub_inv = sub_pose.inverse().matrix
        idx = np.argwhere(template)
        # each sampled point stands for n_template / n_points voxels
        point_mm3 = template_geom.voxel_volume_mm3
        if len(idx) > max_points:
            keep = np.sort(rng.choice(len(idx), size=max_points, replace=False))
            point_mm3 *= len(idx) / max_points
            idx = idx[keep]
        # jitter within each voxel so the samples do not share the subject lattice
        jitter = rng.uniform(-0.5, 0.5, size=idx.shape)
        self.points = np.ascontiguousarray(template_geom.pose.apply(idx + jitter))  # template mm
        self.point_mm3 = point_mm3
        self.template_mm3 = float(np.count_nonzero(template)) * template_geom.voxel_volume_mm3
        self.subject_mm3 = float(np.count_nonzero(subject)) * subject_geom.voxel_volume_mm3

    def __call__(self, affine: AffineTransform) -> float:
        m = self.sub_inv @ affine.inverse().matrix
        overlap = _trilinear_sum(self.sub, m, self.points) * self.point_mm3
        denom = abs(np.linalg.det(affine.linear)) * self.subject_mm3 + self.template_mm3
        return 1.0 - 2.0 * overlap / denom if denom > 0 else 1.0


def _golden_evals(ratio: float) -> int:
    """Interval reductions needed to shrink a bracket by ``ratio``."""
    n = math.ceil(math.log(max(ratio, 1.0)) / -math.log(GOLDEN))
    return int(np.clip(n, 3, N_GOLDEN))


def _golden_line_search(f, x0: np.ndarray, direction: np.ndarray, delta: float, f0: float,
                        n_evals: int):
    """Golden-section search of ``x0 + t * direction`` over ``|t| <= delta``.

    Returns ``(x, f(x), t)``; ``x0`` is kept unless a strictly better point is found.
    """
    lo, hi = -delta, delta

    def at(t):
        return f(x0 + t * direction)

    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = at(c), at(d)
    for _ in range(n_evals):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - GOLDEN * (hi - lo)
            fc = at(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + GOLDEN * (hi - lo)
            fd = at(d)
    best_t, best_f = (c, fc) if fc < fd else (d, fd)
    if best_f < f0:
        return x0 + best_t * direction, best_f, best_t
    return x0, f0, 0.0


@dataclass
class RegistrationResult:
    transform: AffineTransform
    dice: float
    cost_history: list  # one list of accepted costs per pyramid level


def register(subject_skull: LabelVolume, template: TemplateSpace,
             params: RegistrationParams = RegistrationParams(), rng_seed: int = 0) -> RegistrationResult:
    """Full registration run, returning the transform plus diagnostics.

    The optimiser matches the subject skull to the template skull; thin
    shells pin rotations far better than solid heads. The reported Dice
    compares the filled heads.
    """
    subject = subject_skull.data > 0
    if not subject.any():
        raise ValueError("subject skull mask is empty")
    target = template.skull()
    rng = np.random.default_rng(rng_seed)

    c_s, std_s = _mask_stats(subject, subject_skull.geometry)
    c_t, std_t = _mask_stats(target, template.geometry)
    x = np.zeros(N_PARAMS)
    x[6:9] = np.log(std_t / std_s)

    history = []
    for level in range(params.pyramid_levels - 1, -1, -1):
        factor = 2 ** level
        cost_fn = _OverlapCost(subject, subject_skull.geometry, target, template.geometry,
                               factor, params.max_points // factor**2, rng)

        def f(p):
            return cost_fn(params_to_affine(p, c_s, c_t))

        fx = f(x)
        level_hist = [fx]
        brackets = _BRACKETS * factor
        iters = 0
        while iters < params.max_iters_per_level:
            cycle_start, x_start = fx, x
            for i in range(N_PARAMS):
                # only resolve each bracket down to a quarter of its floor
                n_evals = _golden_evals(2.0 * brackets[i] / (0.25 * _MIN_BRACKETS[i] * factor))
                x, fx, t = _golden_line_search(f, x, np.eye(N_PARAMS)[i], brackets[i], fx, n_evals)
                brackets[i] = np.clip(max(2.0 * abs(t), 0.5 * brackets[i]), _MIN_BRACKETS[i],
                                      _BRACKETS[i] * factor)
                level_hist.append(fx)
                iters += 1
                if iters >= params.max_iters_per_level:
                    break
            # pattern move along the cycle's net displacement, for diagonal valleys
            if iters < params.max_iters_per_level and np.any(x != x_start):
                x, fx, _ = _golden_line_search(f, x, x - x_start, 2.0, fx, N_GOLDEN)
                level_hist.append(fx)
                iters += 1
            rel = (cycle_start - fx) / max(abs(cycle_start), 1e-12)
            if rel < params.convergence_tol and np.all(brackets <= 2 * _MIN_BRACKETS * factor):
                break
        log.debug("level x%d: cost %.5f after %d line searches", factor, fx, iters)
        history.append(level_hist)

    transform = params_to_affine(x, c_s, c_t)
    head = fill_head(ndi.binary_closing(subject, iterations=2, border_value=0)) | subject
    moved = resample(binary_volume(head, subject_skull), transform, template.geometry, "nearest")
    a, b = moved.data > 0, template.head_mask.data > 0
    dice = 2.0 * np.count_nonzero(a & b) / max(np.count_nonzero(a) + np.count_nonzero(b), 1)
    return RegistrationResult(transform, float(dice), history)


def estimate_affine(subject_skull: LabelVolume, template: TemplateSpace,
                    params: RegistrationParams = RegistrationParams(), rng_seed: int = 0) -> AffineTransform:
    """Affine (subject mm -> template mm) maximising head-mask overlap.

    Raises :class:`RegistrationError` when the final Dice is below 0.5.
    """
    if not np.any(subject_skull.data):
        raise ValueError("subject skull mask is empty")
    result = register(subject_skull, template, params, rng_seed)
    if result.dice < MIN_DICE:
        raise RegistrationError(result.dice)
    return result.transform


def to_template(volume, transform: AffineTransform, template: TemplateSpace, mode: str = "trilinear"):
    return resample(volume, transform, template.geometry, mode)


def to_patient(label_volume: LabelVolume, transform: AffineTransform, subject_geometry: Geometry,
               mode: str = "nearest") -> LabelVolume:
    """Map a template-space label map back onto the subject grid (nearest only)."""
    if mode != "nearest":
        raise ValueError("to_patient only supports nearest-neighbour interpolation")
    return resample(label_volume, transform.inverse(), subject_geometry, "nearest")
