"""Volume containers, geometry, NIfTI I/O and resampling.

Arrays are indexed ``data[x, y, z]`` (the nibabel convention). A volume's
``pose`` maps voxel indices to patient-space millimetres.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import nibabel as nib
import numpy as np
from scipy import ndimage as ndi

log = logging.getLogger(__name__)

DET_EPS = 1e-9


class VolumeError(ValueError):
    """Malformed volume, header or geometry."""


class VolumeIOError(OSError):
    """File could not be read or written."""


@dataclass(frozen=True)
class AffineTransform:
    """Homogeneous 4x4 map acting on column vectors ``(x, y, z, 1)``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise VolumeError(f"affine must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise VolumeError("affine has non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise VolumeError(f"affine bottom row must be (0, 0, 0, 1), got {m[3]}")
        if abs(np.linalg.det(m[:3, :3])) <= DET_EPS:
            raise VolumeError("affine linear block is singular")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def from_linear(cls, linear, translation=(0.0, 0.0, 0.0)) -> "AffineTransform":
        m = np.eye(4)
        m[:3, :3] = linear
        m[:3, 3] = translation
        return cls(m)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "AffineTransform":
        return AffineTransform(_clean_homogeneous(np.linalg.inv(self.matrix)))

    def compose(self, first: "AffineTransform") -> "AffineTransform":
        """Return ``self ∘ first`` (apply ``first``, then ``self``)."""
        return AffineTransform(_clean_homogeneous(self.matrix @ first.matrix))

    def apply(self, points) -> np.ndarray:
        """Map an ``(..., 3)`` array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.linear.T + self.translation

    def to_list(self) -> list[float]:
        return [float(v) for v in self.matrix.ravel()]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "AffineTransform":
        if len(values) != 16:
            raise VolumeError(f"expected 16 numbers for a 4x4 affine, got {len(values)}")
        return cls(np.asarray(values, dtype=np.float64).reshape(4, 4))

    def save(self, path) -> None:
        path = Path(path)
        _atomic_write_text(path, json.dumps({"matrix": self.to_list()}, indent=2))

    @classmethod
    def load(cls, path) -> "AffineTransform":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise VolumeIOError(f"cannot read transform {path}: {exc}") from exc
        text = text.strip()
        if text.startswith("{") or text.startswith("["):
            obj = json.loads(text)
            values = obj["matrix"] if isinstance(obj, dict) else obj
            values = np.asarray(values, dtype=np.float64).ravel()
        else:
            values = np.asarray(text.split(), dtype=np.float64)
        return cls.from_list(list(values))


def _clean_homogeneous(m: np.ndarray) -> np.ndarray:
    m = np.array(m, dtype=np.float64)
    m[3] = (0.0, 0.0, 0.0, 1.0)
    return m


@dataclass(frozen=True)
class Geometry:
    """Grid shape, voxel spacing (mm) and voxel-to-mm pose."""

    dims: tuple
    spacing: tuple
    pose: AffineTransform

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise VolumeError(f"dims must be three positive counts, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive reals, got {self.spacing}")
        pose = self.pose if isinstance(self.pose, AffineTransform) else AffineTransform(self.pose)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "pose", pose)

    @classmethod
    def from_spacing(cls, dims, spacing, origin=(0.0, 0.0, 0.0)) -> "Geometry":
        return cls(dims, spacing, AffineTransform.from_linear(np.diag(spacing), origin))

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def same_as(self, other: "Geometry", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.pose.matrix, other.pose.matrix, atol=atol)
        )

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "pose": self.pose.to_list()}

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(tuple(d["dims"]), tuple(d["spacing"]), AffineTransform.from_list(d["pose"]))


class _Volume:
    """Shared geometry handling. Data arrays are made read-only."""

    dtype = None

    def __init__(self, data, spacing, pose=None):
        arr = np.array(data, dtype=self.dtype, copy=True)
        if arr.ndim != 3:
            raise VolumeError(f"volume data must be 3-D, got shape {arr.shape}")
        if pose is None:
            pose = AffineTransform.from_linear(np.diag(np.asarray(spacing, dtype=float)))
        self.geometry = Geometry(arr.shape, spacing, pose)
        arr.flags.writeable = False
        self.data = arr

    @property
    def dims(self) -> tuple:
        return self.geometry.dims

    @property
    def spacing(self) -> tuple:
        return self.geometry.spacing

    @property
    def pose(self) -> AffineTransform:
        return self.geometry.pose

    def with_data(self, data):
        """New volume of the same kind and geometry holding ``data``."""
        return type(self)(data, self.spacing, self.pose)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing})"


class ScalarVolume(_Volume):
    """Intensity grid in Hounsfield units, stored as float32."""

    dtype = np.float32

    def __init__(self, data, spacing, pose=None):
        super().__init__(data, spacing, pose)
        if not np.all(np.isfinite(self.data)):
            raise VolumeError("scalar volume contains non-finite intensities")


class LabelVolume(_Volume):
    """Grid of uint8 class IDs; ``n_labels`` bounds the admissible IDs."""

    dtype = np.uint8

    def __init__(self, data, spacing, pose=None, n_labels: int = 5):
        raw = np.asarray(data)
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise VolumeError("label IDs must fit in uint8")
        super().__init__(raw, spacing, pose)
        self.n_labels = int(n_labels)
        if self.data.size and int(self.data.max()) >= self.n_labels:
            raise VolumeError(
                f"label ID {int(self.data.max())} outside scheme 0..{self.n_labels - 1}"
            )

    def with_data(self, data, n_labels: int | None = None):
        return LabelVolume(data, self.spacing, self.pose, self.n_labels if n_labels is None else n_labels)

    def mask(self, label_id: int = 1) -> np.ndarray:
        return self.data == label_id


AnyVolume = Union[ScalarVolume, LabelVolume]


def as_array(x) -> np.ndarray:
    """Voxel array of a volume, or ``x`` itself as an array."""
    return x.data if isinstance(x, _Volume) else np.asarray(x)


def binary_volume(mask, like: _Volume) -> LabelVolume:
    return LabelVolume(np.asarray(mask, dtype=bool).astype(np.uint8), like.spacing, like.pose, n_labels=2)


def voxel_to_world(volume, index) -> np.ndarray:
    geom = volume.geometry if hasattr(volume, "geometry") else volume
    return geom.pose.apply(index)


def world_to_voxel(volume, point) -> np.ndarray:
    geom = volume.geometry if hasattr(volume, "geometry") else volume
    return geom.pose.inverse().apply(point)


# --------------------------------------------------------------------------- I/O


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".tmp-{path.name}")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


def _raw_pixdim(path: Path, header) -> np.ndarray:
    """pixdim as stored on disk; nibabel silently repairs bad values on load."""
    try:
        with nib.openers.ImageOpener(str(path)) as fh:
            raw = type(header).from_fileobj(fh, check=False)
        return np.asarray(raw["pixdim"], dtype=np.float64)
    except Exception:
        return np.asarray(header["pixdim"], dtype=np.float64)


def load_volume(path) -> ScalarVolume:
    """Read a 3-D NIfTI-1 file into a :class:`ScalarVolume`.

    Intensities have ``scl_slope``/``scl_inter`` applied. The pose comes from
    the sform when set, else the qform, else ``diag(pixdim)``.
    """
    path = Path(path)
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types on bad files
        raise VolumeIOError(f"cannot read NIfTI file {path}: {exc}") from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
        raise VolumeError(f"{path}: not a NIfTI-1 image")
    hdr = img.header
    shape = img.shape
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if len(shape) != 3:
        raise VolumeError(f"{path}: expected a 3-D image, header dim gives shape {img.shape}")
    pixdim = _raw_pixdim(path, hdr)
    for axis in range(3):
        if not (np.isfinite(pixdim[axis + 1]) and pixdim[axis + 1] > 0):
            raise VolumeError(f"{path}: header field pixdim[{axis + 1}] = {pixdim[axis + 1]} must be > 0")
    spacing = tuple(pixdim[1:4])

    sform, scode = img.get_sform(coded=True)
    qform, qcode = img.get_qform(coded=True)
    if scode and scode > 0:
        pose = sform
    elif qcode and qcode > 0:
        pose = qform
    else:
        pose = np.diag(list(spacing) + [1.0])
    try:
        data = np.asarray(img.dataobj, dtype=np.float32).reshape(shape)
    except Exception as exc:
        raise VolumeIOError(f"cannot read voxel data from {path}: {exc}") from exc
    return ScalarVolume(data, spacing, AffineTransform(_clean_homogeneous(pose)))


def load_labels(path, n_labels: int = 5) -> LabelVolume:
    vol = load_volume(path)
    data = vol.data
    if not np.array_equal(data, np.round(data)) or data.min() < 0:
        raise VolumeError(f"{path}: label image holds non-integer or negative values")
    return LabelVolume(data.astype(np.uint8), vol.spacing, vol.pose, n_labels=n_labels)


def save_volume(volume: AnyVolume, path) -> None:
    """Write a NIfTI-1 file (gzip when the name ends in ``.gz``).

    The file is written under a temporary name and renamed into place, so a
    failed write never leaves a partial file at ``path``.
    """
    path = Path(path)
    if isinstance(volume, LabelVolume):
        data = np.asarray(volume.data, dtype=np.uint8)
    else:
        data = np.asarray(volume.data, dtype=np.float32)
    img = nib.Nifti1Image(data, volume.pose.matrix)
    img.header.set_zooms(volume.spacing)
    img.header.set_xyzt_units("mm")
    img.header["scl_slope"] = 1.0
    img.header["scl_inter"] = 0.0
    img.set_sform(volume.pose.matrix, code=1)
    img.set_qform(volume.pose.matrix, code=1)
    tmp = path.with_name(f".tmp-{path.name}")
    try:
        nib.save(img, str(tmp))
        os.replace(tmp, path)
    except OSError as exc:
        try:
            tmp.unlink()
        except OSError:
            pass
        raise VolumeIOError(f"cannot write volume to {path}: {exc}") from exc


# ---------------------------------------------------------------------- resample


def resample(source: AnyVolume, transform: AffineTransform, target: Geometry, mode: str = "nearest"):
    """Resample ``source`` onto ``target`` under ``transform`` (source mm -> target mm).

    Target voxels are pulled from the source at the inverse-mapped location.
    Samples falling outside the source grid become 0.
    """
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if isinstance(source, LabelVolume) and mode != "nearest":
        raise VolumeError("label volumes can only be resampled with mode='nearest'")
    if isinstance(target, _Volume):
        target = target.geometry

    # target index -> target mm -> source mm -> source index
    index_map = source.pose.inverse().compose(transform.inverse()).compose(target.pose).matrix
    if source.dims == target.dims and np.allclose(index_map, np.eye(4), atol=1e-9, rtol=0):
        out = np.array(source.data)
    else:
        order = 0 if mode == "nearest" else 1
        data = source.data if order == 0 else source.data.astype(np.float32)
        out = ndi.affine_transform(
            data,
            index_map[:3, :3],
            offset=index_map[:3, 3],
            output_shape=target.dims,
            order=order,
            mode="constant",
            cval=0.0,
            prefilter=False,
        )
    if isinstance(source, LabelVolume):
        return LabelVolume(out, target.spacing, target.pose, n_labels=source.n_labels)
    return ScalarVolume(out, target.spacing, target.pose)
