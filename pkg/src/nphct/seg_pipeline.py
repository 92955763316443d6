"""Per-subject segmentation workflow and compartment volumes.

register -> denoise -> classify tissue -> seed -> evolve -> label
subarachnoid -> back to patient space -> volumes.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .active_contours import (
    DegenerateContourError,
    EvolvingMask,
    McvParams,
    MgacParams,
    mcv_evolve,
    mgac_evolve,
    sphere_mask,
)
from .preprocess import DenoiseParams, SkullThreshold, extract_skull, fill_head, nlm_denoise
from .registration import (
    RegistrationError,
    RegistrationParams,
    TemplateSpace,
    register,
    to_patient,
    to_template,
)
from .tissue_classifier import RandomForestModel, TissueClass, extract_features, predict_voxelwise
from .volume_core import AffineTransform, LabelVolume, ScalarVolume, as_array, binary_volume

log = logging.getLogger(__name__)

# intensity given to voxels outside an evolution domain
MASK_FILL_HU = -1000.0
# SegLabel assigned to each tissue class before the contours run
_TISSUE_TO_SEG = np.array([0, 2, 3, 4], dtype=np.uint8)


class SegLabel(IntEnum):
    BACKGROUND = 0
    VENTRICLE = 1
    SUBARACHNOID = 2
    CEREBRAL_MASS = 3
    SKULL = 4


class PipelineError(RuntimeError):
    """A stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage: str, subject_id: str, cause: BaseException):
        self.stage = stage
        self.subject_id = subject_id
        self.cause = cause
        super().__init__(f"[{subject_id}] stage '{stage}' failed: {cause}")

    @property
    def registration_failed(self) -> bool:
        return isinstance(self.cause, RegistrationError)

    @property
    def degenerate_contour(self) -> bool:
        return isinstance(self.cause, DegenerateContourError)


# --------------------------------------------------------------------- seeds


@dataclass(frozen=True)
class SeedSphere:
    center: tuple
    radius: float

    @classmethod
    def from_dict(cls, d) -> "SeedSphere":
        return cls(tuple(float(v) for v in d["center"]), float(d["radius"]))


@dataclass(frozen=True)
class SeedSpec:
    ventricle_seed: SeedSphere
    cerebral_seeds: tuple

    @classmethod
    def from_dict(cls, d: dict) -> "SeedSpec":
        seeds = tuple(SeedSphere.from_dict(s) for s in d["cerebral_seeds"])
        if len(seeds) != 3:
            raise ValueError(f"expected three cerebral seeds (top, back, front), got {len(seeds)}")
        return cls(SeedSphere.from_dict(d["ventricle_seed"]), seeds)

    def to_dict(self) -> dict:
        return {"ventricle_seed": asdict(self.ventricle_seed),
                "cerebral_seeds": [asdict(s) for s in self.cerebral_seeds]}

    def masks(self, geometry):
        vent = sphere_mask(geometry, self.ventricle_seed.center, self.ventricle_seed.radius)
        cer = np.zeros(geometry.dims, dtype=bool)
        for s in self.cerebral_seeds:
            cer |= sphere_mask(geometry, s.center, s.radius)
        return vent, cer

    def validate(self, template: TemplateSpace) -> None:
        vent, cer = self.masks(template.geometry)
        head = template.head_mask.data > 0
        if not vent.any() or not cer.any():
            raise ValueError("seed spheres contain no template voxels")
        if np.any(vent & ~head) or np.any(cer & ~head):
            raise ValueError("seed spheres must lie inside the template head mask")
        if np.any(vent & cer):
            raise ValueError("ventricle seed overlaps a cerebral seed")


# ------------------------------------------------------------------- config


@dataclass
class PipelineConfig:
    skull: SkullThreshold = field(default_factory=SkullThreshold)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    denoise: DenoiseParams = field(default_factory=DenoiseParams)
    ventricle_mcv: McvParams = field(default_factory=McvParams)
    cerebral_mcv: McvParams = field(default_factory=McvParams)
    mgac: MgacParams = field(default_factory=MgacParams)
    raw_features: bool = False
    rng_seed: int = 0

    _SECTIONS = {"skull": SkullThreshold, "registration": RegistrationParams, "denoise": DenoiseParams,
                 "ventricle_mcv": McvParams, "cerebral_mcv": McvParams, "mgac": MgacParams}

    def to_dict(self) -> dict:
        return {
            "skull": asdict(self.skull),
            "registration": asdict(self.registration),
            "denoise": asdict(self.denoise),
            "ventricle_mcv": asdict(self.ventricle_mcv),
            "cerebral_mcv": asdict(self.cerebral_mcv),
            "mgac": asdict(self.mgac),
            "raw_features": self.raw_features,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        kw = {}
        for key, value in d.items():
            if key in cls._SECTIONS:
                kw[key] = cls._SECTIONS[key](**value)
            elif key in ("raw_features", "rng_seed"):
                kw[key] = value
            else:
                raise ValueError(f"unknown pipeline config key {key!r}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def param_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ------------------------------------------------------------------- report


@dataclass
class VolumeReport:
    subject_id: str
    ventricle_ml: float
    subarachnoid_ml: float
    cerebral_ml: float
    total_ml: float = field(init=False)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ventricle_ml", "subarachnoid_ml", "cerebral_ml"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.total_ml = self.ventricle_ml + self.subarachnoid_ml + self.cerebral_ml

    def to_dict(self) -> dict:
        return asdict(self)


def compute_volume_ml(mask: LabelVolume, label_id: int = 1) -> float:
    """Voxel count times voxel volume, in millilitres."""
    n = int(np.count_nonzero(mask.data == label_id))
    sx, sy, sz = mask.spacing
    return n * sx * sy * sz / 1000.0


def label_subarachnoid(tissue_labels: LabelVolume, ventricle_mask) -> LabelVolume:
    """CSF-class voxels not claimed by the ventricle contour."""
    vent = as_array(ventricle_mask) > 0
    if vent.shape != tissue_labels.dims:
        raise ValueError("tissue labels and ventricle mask shapes differ")
    return binary_volume((tissue_labels.data == TissueClass.CSF) & ~vent, tissue_labels)


def compose_labels(tissue: LabelVolume, ventricle, subarachnoid, cerebral) -> LabelVolume:
    """SegLabel map; precedence Ventricle > Subarachnoid > CerebralMass > Skull > Background."""
    out = np.zeros(tissue.dims, dtype=np.uint8)
    out[tissue.data == TissueClass.SKULL] = SegLabel.SKULL
    out[np.asarray(cerebral, dtype=bool)] = SegLabel.CEREBRAL_MASS
    out[np.asarray(subarachnoid, dtype=bool)] = SegLabel.SUBARACHNOID
    out[np.asarray(ventricle, dtype=bool)] = SegLabel.VENTRICLE
    return LabelVolume(out, tissue.spacing, tissue.pose, n_labels=len(SegLabel))


# ------------------------------------------------------------------ stages


@dataclass
class PreparedSubject:
    """Template-space intermediates shared by every segmentation method."""

    subject_id: str
    scan: ScalarVolume
    transform: AffineTransform
    registration_dice: float
    image: ScalarVolume  # registered and denoised
    tissue: LabelVolume  # TissueClass scheme, zero outside the skull region
    intracranial: np.ndarray  # voxels enclosed by the template-space skull


def _stage(name, subject_id):
    class _Ctx:
        def __enter__(self):
            log.debug("[%s] %s", subject_id, name)

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, subject_id, exc) from exc
            return False

    return _Ctx()


def skull_region(image: ScalarVolume, threshold: SkullThreshold):
    """(skull, intracranial) masks from thresholding a template-space image."""
    skull = extract_skull(image, threshold).data > 0
    # closing only seals the shell for filling; the closed-in voxels stay intracranial
    closed = ndi.binary_closing(skull, iterations=2, border_value=0) | skull
    head = fill_head(closed)
    return skull, head & ~skull


def _head_bbox(mask: np.ndarray, margin: int):
    sl = ndi.find_objects(mask.astype(np.uint8))[0]
    return tuple(slice(max(0, s.start - margin), min(n, s.stop + margin)) for s, n in zip(sl, mask.shape))


def register_and_denoise(scan: ScalarVolume, template: TemplateSpace, config: PipelineConfig,
                         subject_id: str = "subject"):
    """Skull extraction, registration, resampling and denoising.

    Returns ``(transform, registration_dice, denoised template-space image)``.
    """
    with _stage("skull_extraction", subject_id):
        skull = extract_skull(scan, config.skull)
    with _stage("registration", subject_id):
        result = register(skull, template, config.registration, config.rng_seed)
        if result.dice < 0.5:
            raise RegistrationError(result.dice)
    with _stage("resample", subject_id):
        registered = to_template(scan, result.transform, template, "trilinear")
    with _stage("denoise", subject_id):
        head = fill_head(registered.data >= config.skull.min_hu)
        bbox = _head_bbox(head, config.denoise.search_radius + 2) if head.any() else None
        denoised = nlm_denoise(registered, config.denoise, bbox=bbox)
    return result.transform, result.dice, denoised


def prepare_subject(scan: ScalarVolume, template: TemplateSpace, tissue_model: RandomForestModel,
                    config: PipelineConfig = PipelineConfig(), subject_id: str = "subject") -> PreparedSubject:
    transform, reg_dice, image = register_and_denoise(scan, template, config, subject_id)
    with _stage("tissue_classification", subject_id):
        skull, intracranial = skull_region(image, config.skull)
        feats = extract_features(image, raw_only=config.raw_features)
        region = ndi.binary_dilation(skull | intracranial, iterations=2)
        tissue = predict_voxelwise(tissue_model, feats, image, mask=region)
        data = np.array(tissue.data)
        # the threshold catches CSF blurred into bone; inside the head trust the classifier
        intracranial = (intracranial | skull) & (data != TissueClass.SKULL)
        # CSF and cerebral mass only exist inside the skull
        soft = np.isin(data, (TissueClass.CSF, TissueClass.CEREBRAL_MASS))
        data[soft & ~intracranial] = TissueClass.BACKGROUND
        tissue = tissue.with_data(data)
    return PreparedSubject(subject_id, scan, transform, reg_dice, image, tissue, intracranial)


def _masked_image(image: ScalarVolume, domain: np.ndarray) -> ScalarVolume:
    return image.with_data(np.where(domain, image.data, np.float32(MASK_FILL_HU)))


def _seeded(seed_sphere: np.ndarray, domain: np.ndarray, what: str) -> np.ndarray:
    seed = seed_sphere & domain
    if not seed.any():
        raise DegenerateContourError(f"{what} seed does not touch its tissue domain")
    return seed


def segment_prepared(prep: PreparedSubject, template: TemplateSpace, config: PipelineConfig) -> LabelVolume:
    """The proposed method on a prepared subject; returns a template-space SegLabel map."""
    seeds = SeedSpec.from_dict(template.seed_spec)
    vent_seed, cer_seed = seeds.masks(template.geometry)
    tissue = prep.tissue
    csf = tissue.data == TissueClass.CSF
    mass = tissue.data == TissueClass.CEREBRAL_MASS
    with _stage("ventricle_contour", prep.subject_id):
        seed = _seeded(vent_seed, csf, "ventricle")
        ventricle = mcv_evolve(
            _masked_image(prep.image, csf),
            EvolvingMask(binary_volume(seed, tissue), binary_volume(csf, tissue)),
            config.ventricle_mcv,
        ).data > 0
    with _stage("cerebral_contour", prep.subject_id):
        seed = _seeded(cer_seed, mass, "cerebral")
        cerebral = mcv_evolve(
            _masked_image(prep.image, mass),
            EvolvingMask(binary_volume(seed, tissue), binary_volume(mass, tissue)),
            config.cerebral_mcv,
        ).data > 0
    with _stage("subarachnoid", prep.subject_id):
        sub = label_subarachnoid(tissue, ventricle).data > 0
        return compose_labels(tissue, ventricle, sub, cerebral)


def _inside_skull_rest(prep: PreparedSubject, cerebral: np.ndarray) -> LabelVolume:
    """Comparison-arm labelling: skull-region voxels not in cerebral mass are ventricle."""
    cerebral = cerebral & prep.intracranial
    ventricle = prep.intracranial & ~cerebral
    skull = prep.tissue.data == TissueClass.SKULL
    out = np.zeros(prep.tissue.dims, dtype=np.uint8)
    out[skull] = SegLabel.SKULL
    out[cerebral] = SegLabel.CEREBRAL_MASS
    out[ventricle] = SegLabel.VENTRICLE
    return LabelVolume(out, prep.tissue.spacing, prep.tissue.pose, n_labels=len(SegLabel))


def segment_method(method: str, prep: PreparedSubject, template: TemplateSpace,
                   config: PipelineConfig) -> LabelVolume:
    """Template-space SegLabel map for one of the compared methods."""
    if method == "proposed":
        return segment_prepared(prep, template, config)
    if method == "rf-only":
        return _inside_skull_rest(prep, prep.tissue.data == TissueClass.CEREBRAL_MASS)
    seeds = SeedSpec.from_dict(template.seed_spec)
    _, cer_seed = seeds.masks(template.geometry)
    dom = prep.intracranial
    seed = EvolvingMask(binary_volume(_seeded(cer_seed, dom, "cerebral"), prep.image),
                        binary_volume(dom, prep.image))
    with _stage(method, prep.subject_id):
        if method == "mgac":
            cerebral = mgac_evolve(prep.image, seed, config.mgac).data > 0
        elif method == "mcv-unmasked":
            cerebral = mcv_evolve(prep.image, seed, config.cerebral_mcv).data > 0
        else:
            raise ValueError(f"unknown method {method!r}")
    return _inside_skull_rest(prep, cerebral)


def run_method(method: str, prep: PreparedSubject, template: TemplateSpace, config: PipelineConfig) -> LabelVolume:
    """Patient-space SegLabel map for ``method``."""
    seg = segment_method(method, prep, template, config)
    with _stage("to_patient", prep.subject_id):
        return to_patient(seg, prep.transform, prep.scan.geometry)


def volumes_from_labels(seg: LabelVolume, subject_id: str, provenance=None) -> VolumeReport:
    return VolumeReport(
        subject_id,
        compute_volume_ml(seg, SegLabel.VENTRICLE),
        compute_volume_ml(seg, SegLabel.SUBARACHNOID),
        compute_volume_ml(seg, SegLabel.CEREBRAL_MASS),
        provenance=dict(provenance or {}),
    )


def model_version(model: RandomForestModel) -> str:
    return hashlib.sha256(model.to_json().encode()).hexdigest()[:16]


@dataclass
class SegmentationResult:
    labels: LabelVolume  # patient space, SegLabel scheme
    report: VolumeReport
    prepared: PreparedSubject
    template_labels: LabelVolume


def segment_subject(scan: ScalarVolume, template: TemplateSpace, tissue_model: RandomForestModel,
                    seeds: SeedSpec | None = None, config: PipelineConfig = PipelineConfig(),
                    subject_id: str = "subject") -> SegmentationResult:
    """Run the whole workflow on one scan."""
    if seeds is not None:
        template = TemplateSpace(template.geometry, template.head_mask, seeds.to_dict(),
                                 template.seed_spec_path, template.skull_mask)
    prep = prepare_subject(scan, template, tissue_model, config, subject_id)
    seg_t = segment_prepared(prep, template, config)
    with _stage("to_patient", subject_id):
        seg = to_patient(seg_t, prep.transform, scan.geometry)
    report = volumes_from_labels(seg, subject_id, {
        "transform": prep.transform.to_list(),
        "registration_dice": prep.registration_dice,
        "model_version": model_version(tissue_model),
        "param_hash": config.param_hash(),
    })
    return SegmentationResult(seg, report, prep, seg_t)


# label colours for overlays (RGBA), indexed by SegLabel
_OVERLAY_COLOURS = np.array([
    [0, 0, 0, 0], [0.1, 0.4, 1.0, 0.6], [0.1, 0.9, 0.9, 0.5], [1.0, 0.6, 0.1, 0.35], [1.0, 1.0, 1.0, 0.3],
])


def save_overlays(scan: ScalarVolume, labels: LabelVolume, directory, prefix: str = "overlay") -> list:
    """Three orthogonal PNG slices through the ventricle centroid, labels over the scan.

    Returns the written paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    data = labels.data
    vent = np.argwhere(data == SegLabel.VENTRICLE)
    centre = vent.mean(axis=0) if len(vent) else (np.asarray(data.shape) - 1) / 2.0
    centre = np.round(centre).astype(int)
    paths = []
    for axis, name in enumerate(("sagittal", "coronal", "axial")):
        sl = [slice(None)] * 3
        sl[axis] = int(centre[axis])
        img = np.asarray(scan.data[tuple(sl)], dtype=np.float32).T
        lab = data[tuple(sl)].T
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(img, cmap="gray", vmin=-20, vmax=80, origin="lower")
        ax.imshow(_OVERLAY_COLOURS[lab], origin="lower")
        ax.set_axis_off()
        ax.set_title(name)
        path = directory / f"{prefix}_{name}.png"
        fig.savefig(path, dpi=80, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


# ---------------------------------------------------------------- training


def annotate_from_labels(tissue_truth: np.ndarray, n_total: int = 10000, rng_seed: int = 0,
                         region: np.ndarray | None = None, margin: int = 1) -> np.ndarray:
    """Sparse ``x, y, z, class`` annotations sampled evenly across tissue classes.

    Like a human annotator, samples avoid voxels within ``margin`` voxels of
    another class; a class too thin to survive that erosion is sampled whole.
    ``region`` optionally restricts where background samples are drawn.
    """
    rng = np.random.default_rng(rng_seed)
    per_class = n_total // len(TissueClass)
    rows = []
    for c in TissueClass:
        sel = tissue_truth == c
        if c == TissueClass.BACKGROUND and region is not None:
            sel &= region
        if margin > 0:
            core = ndi.binary_erosion(sel, iterations=margin, border_value=1)
            if np.count_nonzero(core) >= per_class:
                sel = core
        idx = np.argwhere(sel)
        if len(idx) == 0:
            continue
        take = rng.choice(len(idx), size=min(per_class, len(idx)), replace=False)
        picked = idx[np.sort(take)]
        rows.append(np.column_stack([picked, np.full(len(picked), int(c))]))
    return np.concatenate(rows).astype(np.int64)


def seg_to_tissue(seg_labels: np.ndarray) -> np.ndarray:
    """Collapse SegLabel IDs onto tissue classes (ventricle and subarachnoid -> CSF)."""
    lut = np.array([TissueClass.BACKGROUND, TissueClass.CSF, TissueClass.CSF,
                    TissueClass.CEREBRAL_MASS, TissueClass.SKULL], dtype=np.uint8)
    return lut[seg_labels]
