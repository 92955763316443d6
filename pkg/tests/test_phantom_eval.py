from types import SimpleNamespace

import numpy as np
import pytest

from nphct.phantom_eval import (
    TABLE2,
    MethodScore,
    PhantomError,
    PhantomSpec,
    compare_methods,
    dice,
    format_table,
    generate_phantom,
    phantom_batch,
    summarize_scores,
    summary_csv,
    synth_cohort,
)
from nphct.seg_pipeline import SegLabel, segment_subject
from nphct.volume_core import Geometry, LabelVolume, ScalarVolume

SMALL = dict(dims=(64, 64, 64), spacing=(3.0, 3.0, 3.0))


def _lv(a):
    return LabelVolume(np.asarray(a, np.uint8), (1, 1, 1), None, 5)


# ------------------------------------------------------------------ phantoms


def test_volumes_hit_targets():
    ph = generate_phantom(PhantomSpec(noise_sigma=0.0))
    vox = np.prod(ph.truth.spacing) / 1000.0
    vent = np.count_nonzero(ph.truth.data == SegLabel.VENTRICLE) * vox
    assert abs(vent - 47.4) <= 0.02 * 47.4
    for key, want in (("subarachnoid_ml", 101.6), ("cerebral_ml", 1214.6)):
        assert abs(ph.volumes_ml[key] - want) <= 0.02 * want


def test_noise_free_intensities():
    ph = generate_phantom(PhantomSpec(noise_sigma=0.0, **SMALL))
    hu = {0: -1000.0, 1: 8.0, 2: 8.0, 3: 35.0, 4: 1000.0}
    for label, value in hu.items():
        assert np.all(ph.image.data[ph.truth.data == label] == value)


def test_noise_level():
    ph = generate_phantom(PhantomSpec(noise_sigma=8.0, **SMALL))
    resid = ph.image.data[ph.truth.data == 0] + 1000.0
    assert abs(resid.std() - 8.0) < 0.2


def test_nested_compartments():
    from scipy import ndimage as ndi
    t = generate_phantom(PhantomSpec.from_table2("nph", rng_seed=2, max_rotation_deg=5.0, **SMALL)).truth.data
    vent = t == SegLabel.VENTRICLE
    mass_or_vent = np.isin(t, (SegLabel.VENTRICLE, SegLabel.CEREBRAL_MASS))
    interior = t != SegLabel.BACKGROUND
    # ventricles never touch anything but cerebral mass
    assert not np.any(ndi.binary_dilation(vent) & ~mass_or_vent)
    # the skull encloses everything else: filling it adds no voxels
    assert np.array_equal(ndi.binary_fill_holes(interior), interior)
    assert not np.any(ndi.binary_dilation(mass_or_vent) & (t == SegLabel.BACKGROUND))


@pytest.mark.parametrize("kw", [dict(ventricle_ml=0.0), dict(cerebral_ml=-5.0),
                                dict(ventricle_ml=1300.0), dict(dims=(40, 40, 40))])
def test_unachievable_rejected(kw):
    with pytest.raises(PhantomError):
        generate_phantom(PhantomSpec(**kw))


def test_deterministic():
    spec = PhantomSpec(max_rotation_deg=5, max_translation_mm=3, rng_seed=9, **SMALL)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert np.array_equal(a.image.data, b.image.data) and np.array_equal(a.truth.data, b.truth.data)
    c = generate_phantom(spec, seed=10)
    assert not np.array_equal(a.image.data, c.image.data)


def test_spec_json_round_trip():
    spec = PhantomSpec(mass_shift_mm=(1.0, 0.0, 0.0), **SMALL)
    assert PhantomSpec.from_json(spec.to_json()) == spec


def test_batch_alternates_diagnosis():
    batch = phantom_batch(2, **SMALL)
    assert batch[0].volumes_ml["ventricle_ml"] == pytest.approx(47.4, rel=0.02)
    assert batch[1].volumes_ml["ventricle_ml"] == pytest.approx(118.0, rel=0.02)


# ------------------------------------------------------------------ dice


def test_dice_examples():
    a = np.zeros((4, 4, 4), np.uint8)
    a[0, 0, :2] = 1
    b = np.zeros_like(a)
    b[0, 0, 1:3] = 1
    assert dice(_lv(a), _lv(a)).dice == 1.0
    c = np.zeros_like(a)
    c[3, 3, :2] = 1
    assert dice(_lv(a), _lv(c)).dice == 0.0
    r = dice(_lv(a), _lv(b))
    assert r.dice == 0.5 and (r.tp, r.fp, r.fn) == (1, 1, 1)
    assert dice(_lv(np.zeros_like(a)), _lv(np.zeros_like(a))).dice == 1.0


def test_dice_set_oracle(rng):
    for _ in range(20):
        p = rng.integers(0, 3, (6, 5, 4))
        t = rng.integers(0, 3, (6, 5, 4))
        for k in range(3):
            P = {i for i in np.ndindex(p.shape) if p[i] == k}
            T = {i for i in np.ndindex(t.shape) if t[i] == k}
            want = 2 * len(P & T) / (len(P) + len(T)) if P or T else 1.0
            r = dice(p, t, k)
            assert r.dice == pytest.approx(want, abs=1e-12)
            assert r.dice == dice(t, p, k).dice


def test_dice_geometry_mismatch():
    with pytest.raises(ValueError):
        dice(_lv(np.zeros((2, 2, 2))), LabelVolume(np.zeros((2, 2, 2), np.uint8), (2, 1, 1), None, 5))
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


# ------------------------------------------------------------------ cohort


def test_cohort_statistics():
    records = synth_cohort(34, 27, seed=0)
    assert len(records) == 61
    for diag, label, n in (("normal", 0, 34), ("nph", 1, 27)):
        rows = [r for r in records if r.label == label]
        assert len(rows) == n
        for key, attr in (("ventricle", "ventricle_ml"), ("subarachnoid", "subarachnoid_ml"),
                          ("cerebral", "cerebral_ml")):
            mean, sd = TABLE2[diag][key]
            got = np.mean([getattr(r, attr) for r in rows])
            assert abs(got - mean) <= 3 * sd / np.sqrt(n)


def test_cohort_floor_and_seed():
    records = synth_cohort(200, 200, seed=5)
    assert min(min(r.ventricle_ml, r.subarachnoid_ml, r.cerebral_ml) for r in records) >= 1.0
    assert all(r.total_ml == r.ventricle_ml + r.subarachnoid_ml + r.cerebral_ml for r in records)
    a = [r.features.tolist() for r in synth_cohort(seed=3)]
    assert a == [r.features.tolist() for r in synth_cohort(seed=3)]
    with pytest.raises(ValueError):
        synth_cohort(1, 5)


def test_cohort_correlation():
    records = synth_cohort(2000, 2, seed=1, correlation=-0.6)
    v = np.array([r.ventricle_ml for r in records if r.label == 0])
    c = np.array([r.cerebral_ml for r in records if r.label == 0])
    assert np.corrcoef(v, c)[0, 1] < -0.5


# ------------------------------------------------------------------ comparison


def test_summary_permutation_invariant(rng):
    scores = [MethodScore(m, f"s{i}", rng.random(), rng.random()) for i in range(6)
              for m in ("proposed", "rf-only")]
    a = summarize_scores(scores)
    b = summarize_scores([scores[i] for i in rng.permutation(len(scores))])
    assert a.keys() == b.keys()
    for m in a:
        for k in a[m]:
            assert a[m][k] == pytest.approx(b[m][k], abs=1e-12)
    assert "proposed" in format_table(a)
    assert summary_csv(a).splitlines()[0].startswith("method,")


def test_failed_subject_scores_zero(test_template, tissue_model):
    g = Geometry.from_spacing((32, 32, 32), (3, 3, 3))
    air = SimpleNamespace(image=ScalarVolume(np.full(g.dims, -1000.0), g.spacing, g.pose),
                          truth=LabelVolume(np.zeros(g.dims, np.uint8), g.spacing, g.pose, 5))
    scores = compare_methods([air], ("proposed", "rf-only"), test_template, tissue_model)
    assert [(s.method, s.ventricle, s.cerebral, s.failed) for s in scores] == \
           [("proposed", 0.0, 0.0, True), ("rf-only", 0.0, 0.0, True)]
    with pytest.raises(ValueError):
        compare_methods([air], ("magic",), test_template, tissue_model)


def test_noise_free_phantom_ventricle(test_template, tissue_model):
    ph = generate_phantom(PhantomSpec(noise_sigma=0.0, rng_seed=21, max_rotation_deg=5.0,
                                      max_translation_mm=3.0))
    res = segment_subject(ph.image, test_template, tissue_model)
    assert dice(res.labels, ph.truth, SegLabel.VENTRICLE).dice >= 0.95
