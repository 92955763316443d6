"""Synthetic head phantoms, the Dice metric and cohort synthesis.

Head frame (mm): +x left-right, +y anterior, +z superior, origin at the head
centre. Skull and brain are "eggs": ellipsoids whose semi-axes differ between
the front/back and top/bottom halves, so the shape has no mirror symmetry
along y or z. The skull base is cut flat, which pins head tilt: a pure egg is
close enough to an ellipsoid that an affine fit can trade rotation for shear.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .volume_core import AffineTransform, Geometry, LabelVolume, ScalarVolume, as_array

log = logging.getLogger(__name__)

HU_AIR = -1000.0
HU_CSF = 8.0
HU_MASS = 35.0
HU_SKULL = 1000.0

# volume statistics (mL): mean, std per compartment and diagnosis
TABLE2 = {
    "normal": {"ventricle": (47.4, 28.2), "subarachnoid": (101.6, 69.7), "cerebral": (1214.6, 100.6)},
    "nph": {"ventricle": (118.0, 41.2), "subarachnoid": (85.2, 44.3), "cerebral": (1210.2, 95.6)},
}

# base egg semi-axes of the inner skull: (x, y_front, y_back, z_top, z_bottom)
SKULL_SHAPE = (64.0, 76.0, 84.0, 66.0, 48.0)
SKULL_BASE = 38.0  # depth of the flat skull base below the centre
# head-frame origin in patient mm at zero pose; centres the egg's extent on the grid
HEAD_OFFSET = (0.0, 4.0, -8.0)
VENTRICLE_RADII = (11.0, 27.0, 13.0)
VENTRICLE_CENTER = (0.0, 4.0, 12.0)
VENTRICLE_SEPARATION = 0.55  # lateral offset of each lobe as a fraction of its x radius


class PhantomError(ValueError):
    """Phantom specification cannot be realised on the grid."""


@dataclass
class PhantomSpec:
    dims: tuple = (128, 128, 128)
    spacing: tuple = (1.5, 1.5, 1.5)
    ventricle_ml: float = 47.4
    subarachnoid_ml: float = 101.6
    cerebral_ml: float = 1214.6
    skull_thickness_mm: float = 6.0
    mass_shift_mm: tuple = (0.0, 0.0, 0.0)
    noise_sigma: float = 8.0
    max_rotation_deg: float = 0.0
    max_translation_mm: float = 0.0
    rng_seed: int = 0

    @classmethod
    def from_table2(cls, diagnosis: str, **kw) -> "PhantomSpec":
        means = {k: v[0] for k, v in TABLE2[diagnosis].items()}
        return cls(ventricle_ml=means["ventricle"], subarachnoid_ml=means["subarachnoid"],
                   cerebral_ml=means["cerebral"], **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        d = json.loads(text)
        for key in ("dims", "spacing", "mass_shift_mm"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ------------------------------------------------------------------ geometry


def egg_gauge(q: np.ndarray, axes) -> np.ndarray:
    """Normalised radius of points ``q`` (N, 3) w.r.t. an egg centred at 0.

    The egg scaled by ``s`` contains exactly the points with gauge <= s.
    """
    ax, ayf, ayb, azt, azb = axes
    ay = np.where(q[:, 1] >= 0, ayf, ayb)
    az = np.where(q[:, 2] >= 0, azt, azb)
    return np.sqrt((q[:, 0] / ax) ** 2 + (q[:, 1] / ay) ** 2 + (q[:, 2] / az) ** 2)


def head_gauge(q: np.ndarray, axes=SKULL_SHAPE, base: float = SKULL_BASE) -> np.ndarray:
    """Gauge of an egg whose bottom is cut flat at ``z = -base``."""
    return np.maximum(egg_gauge(q, axes), -q[:, 2] / base)


def _ellipsoid_gauge(q: np.ndarray, center, radii) -> np.ndarray:
    """Gauge (about the origin) of an ellipsoid that contains the origin.

    ``q`` lies inside the ellipsoid scaled by ``k`` about the origin iff the
    returned value is <= ``k``.
    """
    r = np.asarray(radii, dtype=float)
    u = q / r
    w = np.asarray(center, dtype=float) / r
    uu = np.einsum("ij,ij->i", u, u)
    uw = u @ w
    ww = float(w @ w)
    if ww >= 1.0:
        raise PhantomError("ellipsoid must contain its scaling centre")
    with np.errstate(divide="ignore", invalid="ignore"):
        s_plus = (uw + np.sqrt(uw * uw - uu * (ww - 1.0))) / uu
        g = np.where(uu > 0, 1.0 / s_plus, 0.0)
    return g


def ventricle_gauge(q: np.ndarray) -> np.ndarray:
    """Gauge of the two mirrored, overlapping ventricle lobes about their joint centre."""
    rx, ry, rz = VENTRICLE_RADII
    off = VENTRICLE_SEPARATION * rx
    p = q - np.asarray(VENTRICLE_CENTER)
    g1 = _ellipsoid_gauge(p, (off, 0.0, 0.0), VENTRICLE_RADII)
    g2 = _ellipsoid_gauge(p, (-off, 0.0, 0.0), VENTRICLE_RADII)
    return np.minimum(g1, g2)


def _scale_for_count(gauge: np.ndarray, n: int) -> float:
    """Smallest scale whose digitised region holds ``n`` voxels."""
    if n <= 0:
        raise PhantomError("compartment target volume must be positive")
    if n > gauge.size:
        raise PhantomError("compartment target exceeds the grid")
    part = np.partition(gauge, n - 1)
    return float(part[n - 1])


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    if max_deg <= 0:
        return np.eye(3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(-max_deg, max_deg))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


@dataclass
class Phantom:
    image: ScalarVolume
    truth: LabelVolume
    head_pose: AffineTransform  # head frame mm -> patient mm
    volumes_ml: dict = field(default_factory=dict)


def _head_frame_points(geometry: Geometry, head_pose: AffineTransform) -> np.ndarray:
    idx = np.indices(geometry.dims, dtype=np.float64).reshape(3, -1).T
    world = geometry.pose.apply(idx)
    return head_pose.inverse().apply(world)


def generate_phantom(spec: PhantomSpec = PhantomSpec(), seed: int | None = None) -> Phantom:
    """Noisy CT-like head with exact ground truth (SegLabel scheme)."""
    from .seg_pipeline import SegLabel

    seed = spec.rng_seed if seed is None else seed
    rng = np.random.default_rng(seed)
    targets = (spec.ventricle_ml, spec.subarachnoid_ml, spec.cerebral_ml)
    if any(t <= 0 for t in targets):
        raise PhantomError("all compartment target volumes must be positive")

    dims = tuple(int(d) for d in spec.dims)
    spacing = tuple(float(s) for s in spec.spacing)
    center_index = (np.asarray(dims) - 1) / 2.0
    geometry = Geometry.from_spacing(dims, spacing, origin=-center_index * np.asarray(spacing))
    R = _random_rotation(rng, spec.max_rotation_deg)
    t = rng.uniform(-1, 1, size=3) * spec.max_translation_mm if spec.max_translation_mm > 0 else np.zeros(3)
    head_pose = AffineTransform.from_linear(R, t + np.asarray(HEAD_OFFSET))
    q = _head_frame_points(geometry, head_pose)

    vox_ml = geometry.voxel_volume_mm3 / 1000.0
    n_vent = int(round(spec.ventricle_ml / vox_ml))
    n_mass_egg = int(round((spec.ventricle_ml + spec.cerebral_ml) / vox_ml))
    n_inner = int(round(sum(targets) / vox_ml))

    g_vent = ventricle_gauge(q)
    k_vent = _scale_for_count(g_vent, n_vent)
    vent = g_vent <= k_vent

    g_mass = head_gauge(q - np.asarray(spec.mass_shift_mm))
    k_mass = _scale_for_count(g_mass, n_mass_egg)
    mass_egg = g_mass <= k_mass

    g_in = head_gauge(q)
    k_in = _scale_for_count(g_in, n_inner)
    inner = g_in <= k_in

    if np.any(vent & ~mass_egg):
        raise PhantomError("ventricles are not contained in the cerebral mass")
    if np.any(mass_egg & ~inner):
        raise PhantomError("cerebral mass is not contained in the inner skull")
    outer_axes = tuple(a * k_in + spec.skull_thickness_mm for a in SKULL_SHAPE)
    outer = head_gauge(q, outer_axes, SKULL_BASE * k_in + spec.skull_thickness_mm) <= 1.0
    skull = outer & ~inner
    if spec.skull_thickness_mm <= 0 or not skull.any():
        raise PhantomError("skull shell is empty")
    # the whole head must sit inside the grid with a one-voxel air margin
    border = np.zeros(dims, dtype=bool)
    border[[0, -1], :, :] = border[:, [0, -1], :] = border[:, :, [0, -1]] = True
    if np.any(outer.reshape(dims) & border):
        raise PhantomError("head does not fit inside the grid")

    labels = np.full(q.shape[0], SegLabel.BACKGROUND, dtype=np.uint8)
    labels[skull] = SegLabel.SKULL
    labels[inner] = SegLabel.SUBARACHNOID
    labels[mass_egg] = SegLabel.CEREBRAL_MASS
    labels[vent] = SegLabel.VENTRICLE
    labels = labels.reshape(dims)

    hu = np.array([HU_AIR, HU_CSF, HU_CSF, HU_MASS, HU_SKULL], dtype=np.float32)
    image = hu[labels]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=dims).astype(np.float32)

    counts = np.bincount(labels.ravel(), minlength=5)
    volumes = {
        "ventricle_ml": counts[SegLabel.VENTRICLE] * vox_ml,
        "subarachnoid_ml": counts[SegLabel.SUBARACHNOID] * vox_ml,
        "cerebral_ml": counts[SegLabel.CEREBRAL_MASS] * vox_ml,
    }
    for (name, got), want in zip(volumes.items(), targets):
        if abs(got - want) > 0.02 * want:
            raise PhantomError(f"{name} digitised to {got:.1f} mL, target {want:.1f} mL")
    return Phantom(
        ScalarVolume(image, spacing, geometry.pose),
        LabelVolume(labels, spacing, geometry.pose, n_labels=5),
        head_pose,
        volumes,
    )


def phantom_batch(n: int, noise_sigma: float = 8.0, base_seed: int = 0, **kw) -> list:
    """``n`` phantoms alternating normal/NPH Table-2 means, seeds base_seed..base_seed+n-1.

    Each phantom gets a small random head pose (<= 5 deg, <= 3 mm).
    """
    kw.setdefault("max_rotation_deg", 5.0)
    kw.setdefault("max_translation_mm", 3.0)
    out = []
    for i in range(n):
        diagnosis = "normal" if i % 2 == 0 else "nph"
        spec = PhantomSpec.from_table2(diagnosis, noise_sigma=noise_sigma, rng_seed=base_seed + i, **kw)
        out.append(generate_phantom(spec))
    return out


# ----------------------------------------------------------------- template


def make_test_template(dims=(128, 128, 128), spacing=(1.5, 1.5, 1.5)):
    """Noise-free reference head standing in for an atlas template.

    Returns ``(TemplateSpace, Phantom)``; the phantom carries the template's
    intensity image and labels. Seeds follow the template anatomy: one sphere
    at the ventricle centre and three in the cerebral mass under the skull
    (top, back, front).
    """
    from .registration import TemplateSpace
    from .seg_pipeline import SegLabel
    from .volume_core import binary_volume

    spec = PhantomSpec(dims=dims, spacing=spacing, ventricle_ml=80.0, subarachnoid_ml=93.0,
                       cerebral_ml=1212.0, noise_sigma=0.0)
    ph = generate_phantom(spec)
    head = ph.truth.data > 0
    mass_shift = np.asarray(spec.mass_shift_mm)
    # mass egg scale, recovered from the digitised truth extent along +z
    idx = np.argwhere(np.isin(ph.truth.data, (SegLabel.CEREBRAL_MASS, SegLabel.VENTRICLE)))
    pts = ph.head_pose.inverse().apply(ph.truth.pose.apply(idx))
    k_mass = float(head_gauge(pts - mass_shift).max())
    ax, ayf, ayb, azt, azb = (a * k_mass for a in SKULL_SHAPE)
    inset = 12.0
    to_world = ph.head_pose.apply
    cerebral = [
        (0.0, mass_shift[1], azt + mass_shift[2] - inset),
        (0.0, -ayb + mass_shift[1] + inset, mass_shift[2]),
        (0.0, ayf + mass_shift[1] - inset, mass_shift[2]),
    ]
    seeds = {
        "ventricle_seed": {"center": to_world(np.array(VENTRICLE_CENTER)).tolist(), "radius": 4.0},
        "cerebral_seeds": [{"center": to_world(np.array(c)).tolist(), "radius": 6.0} for c in cerebral],
    }
    skull = ph.truth.data == SegLabel.SKULL
    template = TemplateSpace(ph.truth.geometry, binary_volume(head, ph.truth), seeds, "seeds.json",
                             binary_volume(skull, ph.truth))
    return template, ph


# --------------------------------------------------------------------- dice


@dataclass(frozen=True)
class DiceResult:
    dice: float
    tp: int
    fp: int
    fn: int


def dice(pred, truth, class_id: int = 1) -> DiceResult:
    """Dice of one class; two empty masks score 1.0."""
    p_arr = as_array(pred)
    t_arr = as_array(truth)
    if hasattr(pred, "geometry") and hasattr(truth, "geometry"):
        if not pred.geometry.same_as(truth.geometry):
            raise ValueError("Dice needs volumes with identical geometry")
    elif p_arr.shape != t_arr.shape:
        raise ValueError(f"shape mismatch {p_arr.shape} vs {t_arr.shape}")
    p = p_arr == class_id
    t = t_arr == class_id
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    denom = 2 * tp + fp + fn
    return DiceResult(1.0 if denom == 0 else 2.0 * tp / denom, tp, fp, fn)


# ------------------------------------------------------------------- cohort


def synth_cohort(n_normal: int = 34, n_nph: int = 27, seed: int = 0, floor_ml: float = 1.0,
                 correlation: float = 0.0):
    """Subject records drawn from Gaussians at the Table-2 statistics.

    ``correlation`` couples ventricle and cerebral volume within a class
    (negative values make larger ventricles come with less mass).
    """
    from .nph_predict import SubjectRecord

    if n_normal < 2 or n_nph < 2:
        raise ValueError("need at least two subjects per class")
    if not -1.0 <= correlation <= 1.0:
        raise ValueError("correlation must lie in [-1, 1]")
    rng = np.random.default_rng(seed)
    corr = np.eye(3)
    corr[0, 2] = corr[2, 0] = correlation
    records = []
    for diagnosis, n, label in (("normal", n_normal, 0), ("nph", n_nph, 1)):
        stats = TABLE2[diagnosis]
        mean = np.array([stats[k][0] for k in ("ventricle", "subarachnoid", "cerebral")])
        std = np.array([stats[k][1] for k in ("ventricle", "subarachnoid", "cerebral")])
        for i in range(n):
            if correlation == 0.0:
                draw = [rng.normal(m, s) for m, s in zip(mean, std)]
            else:
                draw = rng.multivariate_normal(mean, corr * np.outer(std, std))
            v, s_, c = (max(floor_ml, float(x)) for x in draw)
            records.append(SubjectRecord(f"{diagnosis}-{i:03d}", v, s_, c, label=label))
    return records


# ----------------------------------------------------------- method compare

METHODS = ("proposed", "rf-only", "mgac", "mcv-unmasked")


@dataclass
class MethodScore:
    method: str
    subject: str
    ventricle: float
    cerebral: float
    failed: bool = False


TRAINING_SEED = 1000  # training phantom seed, kept clear of evaluation seeds


def train_phantom_model(template, config=None, seed: int = TRAINING_SEED, n_annotations: int = 10000,
                        diagnosis: str = "normal"):
    """Tissue forest trained on one noisy phantom, annotated from its truth.

    The phantom goes through the same registration and denoising as a real
    scan; annotations are drawn from its template-space ground truth.
    """
    from .registration import to_template
    from .seg_pipeline import PipelineConfig, annotate_from_labels, register_and_denoise, seg_to_tissue
    from .tissue_classifier import ForestParams, train_tissue_model

    config = config or PipelineConfig()
    ph = generate_phantom(PhantomSpec.from_table2(diagnosis, rng_seed=seed, max_rotation_deg=5.0,
                                                  max_translation_mm=3.0))
    transform, _, image = register_and_denoise(ph.image, template, config, f"train-{seed}")
    truth = to_template(ph.truth, transform, template, "nearest")
    ann = annotate_from_labels(seg_to_tissue(truth.data), n_annotations, config.rng_seed)
    return train_tissue_model(image, ann, ForestParams(), config.rng_seed, raw_only=config.raw_features)


def compare_methods(phantoms, methods=METHODS, template=None, tissue_model=None, config=None):
    """Ventricle / cerebral-mass Dice per method, scored in patient space.

    Every method shares registration, denoising and voxel classification for
    a subject; only the segmentation step differs. Without a template or
    model, the test template and a phantom-trained forest are used.
    """
    from .seg_pipeline import PipelineConfig, SegLabel, prepare_subject, run_method

    config = config or PipelineConfig()
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    if template is None:
        template, _ = make_test_template()
    if tissue_model is None:
        tissue_model = train_phantom_model(template, config)
    scores = []
    for i, ph in enumerate(phantoms):
        name = f"phantom-{i}"
        try:
            prep = prepare_subject(ph.image, template, tissue_model, config, subject_id=name)
        except Exception as exc:  # a failed subject scores 0 for every method
            log.warning("%s: preparation failed: %s", name, exc)
            scores.extend(MethodScore(m, name, 0.0, 0.0, True) for m in methods)
            continue
        for m in methods:
            try:
                seg = run_method(m, prep, template, config)
                scores.append(MethodScore(
                    m, name,
                    dice(seg, ph.truth, SegLabel.VENTRICLE).dice,
                    dice(seg, ph.truth, SegLabel.CEREBRAL_MASS).dice,
                ))
            except Exception as exc:
                log.warning("%s/%s failed: %s", name, m, exc)
                scores.append(MethodScore(m, name, 0.0, 0.0, True))
    return scores


def summarize_scores(scores, methods=METHODS) -> dict:
    out = {}
    for m in methods:
        rows = [s for s in scores if s.method == m]
        if not rows:
            continue
        v = np.array([s.ventricle for s in rows])
        c = np.array([s.cerebral for s in rows])
        out[m] = {"ventricle_mean": float(v.mean()), "ventricle_std": float(v.std()),
                  "cerebral_mean": float(c.mean()), "cerebral_std": float(c.std()),
                  "n": len(rows), "failures": sum(s.failed for s in rows)}
    return out


def format_table(summary: dict) -> str:
    lines = [f"{'Method':<14}| {'Ventricle (Dice)':<20}| {'Cerebral Mass (Dice)':<20}"]
    lines.append("-" * len(lines[0]))
    for m, s in summary.items():
        lines.append(
            f"{m:<14}| {100 * s['ventricle_mean']:6.2f} ± {100 * s['ventricle_std']:5.2f} %  "
            f"| {100 * s['cerebral_mean']:6.2f} ± {100 * s['cerebral_std']:5.2f} %"
        )
    return "\n".join(lines)


def summary_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "ventricle_mean", "ventricle_std", "cerebral_mean", "cerebral_std", "n", "failures"])
    for m, s in summary.items():
        w.writerow([m, s["ventricle_mean"], s["ventricle_std"], s["cerebral_mean"], s["cerebral_std"],
                    s["n"], s["failures"]])
    return buf.getvalue()


def write_phantom(ph: Phantom, directory, name: str) -> None:
    from .volume_core import save_volume

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_volume(ph.image, directory / f"{name}_ct.nii.gz")
    save_volume(ph.truth, directory / f"{name}_truth.nii.gz")
