import numpy as np
import pytest

from nphct.active_contours import (
    DegenerateContourError,
    EvolvingMask,
    McvParams,
    MgacParams,
    boundary,
    chan_vese_energy,
    inf_sup,
    mcv_evolve,
    mgac_evolve,
    region_means,
    sphere_mask,
    sup_inf,
)
from nphct.phantom_eval import dice
from nphct.volume_core import Geometry, ScalarVolume, binary_volume

GEOM = Geometry.from_spacing((40, 40, 40), (1, 1, 1))
CENTER = (19.5, 19.5, 19.5)


def _ball(r, center=CENTER, geom=GEOM):
    return sphere_mask(geom, center, r)


def _two_level(inside=10.0, outside=40.0, r=10.0):
    truth = _ball(r)
    return ScalarVolume(np.where(truth, inside, outside), (1, 1, 1)), truth


def _seed(mask, like, domain=None):
    return EvolvingMask(binary_volume(mask, like), None if domain is None else binary_volume(domain, like))


# ---------------------------------------------------------------- region means


def test_region_means_indicator():
    m = _ball(6)
    assert region_means(m * 100.0, m) == (100.0, 0.0)


def test_region_means_constant():
    c1, c2 = region_means(np.full((5, 5, 5), 42.0), np.indices((5, 5, 5))[0] < 2)
    assert c1 == pytest.approx(42.0) and c2 == pytest.approx(42.0)


def test_region_means_direct_summation(rng):
    img = rng.normal(20, 15, (9, 8, 7))
    mask = rng.random(img.shape) < 0.3
    dom = rng.random(img.shape) < 0.8
    s_in = n_in = s_out = n_out = 0.0
    for idx in np.ndindex(img.shape):
        if not dom[idx]:
            continue
        if mask[idx]:
            s_in += img[idx]
            n_in += 1
        else:
            s_out += img[idx]
            n_out += 1
    c1, c2 = region_means(img, mask, dom)
    assert c1 == pytest.approx(s_in / n_in, rel=1e-12)
    assert c2 == pytest.approx(s_out / n_out, rel=1e-12)


@pytest.mark.parametrize("fill", [0, 1])
def test_region_means_degenerate(fill):
    with pytest.raises(DegenerateContourError):
        region_means(np.zeros((3, 3, 3)), np.full((3, 3, 3), fill))


# ---------------------------------------------------------------- morphology


def test_si_is_keep_uniform_neighbourhoods(rng):
    u = rng.random((14, 14, 14)) < 0.5
    u[2:8, 2:8, 2:8] = True
    u[8:13, 8:13, 8:13] = False
    p = np.pad(u, 1)
    uniform = np.zeros(u.shape, bool)
    for idx in np.ndindex(u.shape):
        nb = p[idx[0]:idx[0] + 3, idx[1]:idx[1] + 3, idx[2]:idx[2] + 3]
        uniform[idx] = nb.all() or not nb.any()
    assert uniform.sum() > 50
    for op in (sup_inf, inf_sup):
        out = op(u)
        assert np.array_equal(out[uniform], u[uniform])


def test_si_anti_extensive_is_extensive(rng):
    u = rng.random((10, 10, 10)) < 0.6
    assert not np.any(sup_inf(u) & ~u)
    assert not np.any(u & ~inf_sup(u))


def test_si_removes_spike():
    u = np.zeros((9, 9, 9), bool)
    u[2:7, 2:7, 2:5] = True
    u[4, 4, 5] = True  # one-voxel bump on a flat face
    assert not sup_inf(u)[4, 4, 5]
    assert sup_inf(u)[4, 4, 3]


def test_boundary_of_block():
    u = np.zeros((6, 6, 6), bool)
    u[2:4, 2:4, 2:4] = True
    b = boundary(u)
    assert b[2, 2, 2] and b[1, 2, 2] and not b[0, 0, 0]


# ---------------------------------------------------------------- MCV


def test_sphere_recovered_from_small_seed():
    img, truth = _two_level()
    out = mcv_evolve(img, _seed(_ball(3), img))
    assert dice(out, binary_volume(truth, img)).dice >= 0.95


def test_true_partition_is_fixed_point():
    img, truth = _two_level()
    out = mcv_evolve(img, _seed(truth, img), McvParams(smoothing_passes=0))
    assert np.array_equal(out.data > 0, truth)


def test_smoothing_barely_moves_true_partition():
    img, truth = _two_level()
    out = mcv_evolve(img, _seed(truth, img))
    assert dice(out, binary_volume(truth, img)).dice >= 0.99


@pytest.mark.parametrize("a,b", [(2.0, 0.0), (0.5, -300.0), (7.0, 1000.0)])
def test_affine_rescaling_invariance(rng, a, b):
    img, truth = _two_level()
    noisy = img.data + rng.normal(0, 6, img.data.shape)
    seed = _ball(4)
    ref = mcv_evolve(ScalarVolume(noisy, (1, 1, 1)), _seed(seed, img), McvParams(iterations=20))
    got = mcv_evolve(ScalarVolume(a * noisy + b, (1, 1, 1)), _seed(seed, img), McvParams(iterations=20))
    assert np.array_equal(ref.data, got.data)


def test_constant_image_returns_seed():
    img = ScalarVolume(np.full((12, 12, 12), 40.0), (1, 1, 1))
    seed = np.zeros((12, 12, 12), bool)
    seed[4:7, 4:7, 4:7] = True
    assert np.array_equal(mcv_evolve(img, _seed(seed, img)).data > 0, seed)


def test_empty_seed_rejected():
    img, _ = _two_level()
    with pytest.raises(DegenerateContourError):
        mcv_evolve(img, _seed(np.zeros(GEOM.dims, bool), img))


def test_collapse_reports_iteration():
    img, truth = _two_level()
    seed = np.zeros(GEOM.dims, bool)
    seed[0, 0, 0] = True  # lone outside voxel
    with pytest.raises(DegenerateContourError) as exc:
        mcv_evolve(img, _seed(seed, img))
    assert exc.value.iteration == 0


def test_domain_containment_every_iteration(rng):
    img, truth = _two_level()
    noisy = ScalarVolume(img.data + rng.normal(0, 5, img.data.shape), (1, 1, 1))
    dom = np.indices(GEOM.dims)[0] < 22  # cuts the sphere
    seen = []

    def check(it, u):
        seen.append(it)
        assert u.dtype == bool

    seed = _ball(3) & dom
    out = mcv_evolve(noisy, _seed(seed, img, dom), iter_callback=check)
    assert seen and not np.any((out.data > 0) & ~dom)
    assert dice(out, binary_volume(truth & dom, img)).dice >= 0.9


def test_seed_outside_domain_rejected():
    img, _ = _two_level()
    with pytest.raises(ValueError):
        _seed(_ball(5), img, _ball(3))


def test_mcv_deterministic(rng):
    img, _ = _two_level()
    noisy = ScalarVolume(img.data + rng.normal(0, 8, img.data.shape), (1, 1, 1))
    a = mcv_evolve(noisy, _seed(_ball(3), img))
    b = mcv_evolve(noisy, _seed(_ball(3), img))
    assert np.array_equal(a.data, b.data)


def test_energy_lower_at_truth():
    img, truth = _two_level()
    assert chan_vese_energy(img, truth) < chan_vese_energy(img, _ball(7))


def test_params_validated():
    with pytest.raises(ValueError):
        McvParams(lambda1=0)
    with pytest.raises(ValueError):
        McvParams(iterations=0)
    with pytest.raises(ValueError):
        MgacParams(alpha=0)


# ---------------------------------------------------------------- MGAC


def test_mgac_sharp_sphere():
    img, truth = _two_level(inside=100.0, outside=0.0)
    out = mgac_evolve(img, _seed(_ball(3), img), MgacParams(balloon=1.0))
    assert dice(out, binary_volume(truth, img)).dice >= 0.9


def test_mgac_constant_image_leaks_to_domain():
    img = ScalarVolume(np.full(GEOM.dims, 30.0), (1, 1, 1))
    dom = _ball(15)
    out = mgac_evolve(img, _seed(_ball(2), img, dom), MgacParams(balloon=1.0))
    assert np.array_equal(out.data > 0, dom)


def test_mgac_shrinking_seed_collapses():
    img = ScalarVolume(np.full(GEOM.dims, 30.0), (1, 1, 1))
    seed = np.zeros(GEOM.dims, bool)
    seed[0:3, 0:3, 0:3] = True
    with pytest.raises(DegenerateContourError):
        mgac_evolve(img, _seed(seed, img), MgacParams(balloon=-1.0))
