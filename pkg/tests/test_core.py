import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from fedsplat.core import (SH_C0, SH_COEFFS, Camera, Gaussian, GaussianCloud, InvalidModelError,
                           covariance_from_factors, logit, prune_by_opacity, sh_basis,
                           sh_to_color, sigmoid)

from conftest import random_cloud


def test_covariance_identity_rotation():
    cov = covariance_from_factors([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 9.0]), atol=1e-15)


def test_covariance_quarter_turn_about_z():
    q = [np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)]  # (w, x, y, z)
    cov = covariance_from_factors([1.0, 2.0, 1.0], q)
    np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_matches_scipy_rotation(rng):
    # scipy stores quaternions scalar-last
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        s = rng.uniform(0.1, 2.0, 3)
        R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        np.testing.assert_allclose(covariance_from_factors(s, q), R @ np.diag(s ** 2) @ R.T,
                                   atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1),
       st.lists(st.floats(0.01, 5.0), min_size=3, max_size=3))
def test_covariance_spectrum_and_symmetry(qv, s):
    q = np.array(qv) / np.linalg.norm(qv)
    cov = covariance_from_factors(np.array(s), q)
    assert np.array_equal(cov, cov.T)
    np.linalg.cholesky(cov + 1e-12 * np.eye(3))
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(np.square(s)),
                               rtol=1e-9, atol=1e-12)


def test_covariance_rejects_non_finite():
    with pytest.raises(ValueError):
        covariance_from_factors([1.0, np.nan, 1.0], [1.0, 0, 0, 0])


def test_sh_zero_is_mid_gray():
    rgb = sh_to_color(np.zeros((SH_COEFFS, 3)), np.array([0.3, -0.4, np.sqrt(0.75)]))
    np.testing.assert_array_equal(rgb, [0.5, 0.5, 0.5])


def test_sh_dc_constant():
    k = np.zeros((SH_COEFFS, 3))
    k[0] = [0.7, -0.2, 1.5]
    rgb = sh_to_color(k, np.array([0.0, 0.0, 1.0]))
    expected = np.maximum(0.2820948 * k[0] + 0.5, 0.0)
    np.testing.assert_allclose(rgb, expected, atol=1e-7)
    assert SH_C0 == pytest.approx(0.5 / np.sqrt(np.pi), abs=1e-15)


def test_sh_degree_one_parity():
    k = np.zeros((SH_COEFFS, 3))
    k[0] = 0.3
    k[1:4] = [[0.2, 0.1, -0.1], [0.05, 0.0, 0.3], [-0.4, 0.25, 0.15]]
    up, down = np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])
    a, b = sh_to_color(k, up), sh_to_color(k, down)
    dc = SH_C0 * k[0] + 0.5
    np.testing.assert_allclose(a - dc, -(b - dc), atol=1e-15)
    assert not np.allclose(a, b)


def test_sh_basis_against_closed_forms(rng):
    # real SH written out from the standard table, independent of the module constants
    d = rng.normal(size=(50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x, y, z = d.T
    ref = np.stack([
        np.full_like(x, 0.5 * np.sqrt(1 / np.pi)),
        -np.sqrt(3 / (4 * np.pi)) * y, np.sqrt(3 / (4 * np.pi)) * z, -np.sqrt(3 / (4 * np.pi)) * x,
        0.5 * np.sqrt(15 / np.pi) * x * y, -0.5 * np.sqrt(15 / np.pi) * y * z,
        0.25 * np.sqrt(5 / np.pi) * (3 * z * z - 1), -0.5 * np.sqrt(15 / np.pi) * x * z,
        0.25 * np.sqrt(15 / np.pi) * (x * x - y * y),
    ], axis=1)
    np.testing.assert_allclose(sh_basis(d), ref, atol=1e-12)


def test_sh_dc_invariant_to_roll_about_view_dir(rng):
    k = np.zeros((SH_COEFFS, 3))
    k[0] = rng.normal(size=3)
    for _ in range(10):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        np.testing.assert_allclose(sh_to_color(k, d), sh_to_color(k, np.array([0, 0, 1.0])))


def test_prune_examples():
    cloud = GaussianCloud(np.zeros((3, 3)), np.zeros((3, 3)), np.tile([1.0, 0, 0, 0], (3, 1)),
                          np.zeros((3, SH_COEFFS, 3)), np.array([-10.0, 0.0, 10.0]))
    kept = prune_by_opacity(cloud, 0.05)
    np.testing.assert_array_equal(kept.opacity_logits, [0.0, 10.0])


def test_prune_boundary_is_inclusive():
    o = np.full(4, np.log(0.05 / 0.95))
    cloud = GaussianCloud(np.zeros((4, 3)), np.zeros((4, 3)), np.tile([1.0, 0, 0, 0], (4, 1)),
                          np.zeros((4, SH_COEFFS, 3)), o)
    assert len(prune_by_opacity(cloud, 0.05)) == 4


def test_prune_matches_filter_and_is_idempotent(rng):
    cloud = random_cloud(rng, 300)
    cloud = cloud.replace(opacity_logits=rng.normal(-2, 2, 300))
    once = prune_by_opacity(cloud, 0.05)
    expected = [i for i in range(len(cloud)) if 1 / (1 + np.exp(-cloud.opacity_logits[i])) >= 0.05]
    np.testing.assert_array_equal(once.positions, cloud.positions[expected])
    assert prune_by_opacity(once, 0.05).equals(once)
    with pytest.raises(ValueError):
        prune_by_opacity(cloud, 1.0)


def test_sigmoid_logit_round_trip():
    x = np.linspace(-30, 30, 61)
    np.testing.assert_allclose(logit(sigmoid(x[np.abs(x) < 20])), x[np.abs(x) < 20], atol=1e-8)
    assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0
    assert sigmoid(logit(0.05)) == pytest.approx(0.05, abs=1e-15)


def test_gaussian_invariants():
    g = Gaussian.create([0, 0, 1], [0.1, 0.2, 0.3])
    assert g.opacity == 0.5
    with pytest.raises(InvalidModelError):
        Gaussian.create([0, 0, 1], [0.1, -0.2, 0.3])
    with pytest.raises(InvalidModelError):
        Gaussian([0, 0, 1], [0, 0, 0], [1.0, 0.0, 0.0, 0.01], np.zeros((9, 3)), 0.0)
    with pytest.raises(InvalidModelError):
        Gaussian([0, 0, 1], [0, 0, 0], [1.0, 0, 0, 0], np.full((9, 3), np.inf), 0.0)


def test_cloud_is_immutable_and_bounded(rng):
    pos = rng.normal(size=(5, 3))
    src = pos.copy()
    cloud = GaussianCloud(src, np.zeros((5, 3)), np.tile([1.0, 0, 0, 0], (5, 1)),
                          np.zeros((5, SH_COEFFS, 3)), np.zeros(5))
    src[0] = 100.0
    np.testing.assert_array_equal(cloud.positions, pos)
    with pytest.raises(ValueError):
        cloud.positions[0, 0] = 1.0
    assert np.all(cloud.bounds[0] <= pos.min(0)) and np.all(cloud.bounds[1] >= pos.max(0))
    # explicit bounds are widened to enclose every position
    small = cloud.replace(bounds=np.zeros((2, 3)))
    np.testing.assert_array_equal(small.bounds[0], np.minimum(0, pos.min(0)))


def test_cloud_subset_concat_iter(rng):
    a = random_cloud(rng, 4)
    b = random_cloud(rng, 3)
    c = a.concat(b)
    assert len(c) == 7
    assert c.subset(np.arange(4)).equals(a)
    assert [g.opacity_logit for g in c] == list(c.opacity_logits)
    assert GaussianCloud.from_gaussians(list(a)).equals(a)
    assert len(GaussianCloud.empty()) == 0


def test_camera_validation():
    K = np.array([[10.0, 0, 4], [0, 10, 4], [0, 0, 1]])
    E = np.hstack([np.eye(3), np.zeros((3, 1))])
    Camera(K, E, 8, 8)
    bad_k = K.copy()
    bad_k[0, 1] = 0.5
    with pytest.raises(InvalidModelError):
        Camera(bad_k, E, 8, 8)
    with pytest.raises(InvalidModelError):
        Camera(np.diag([-1.0, 10, 1]), E, 8, 8)
    bad_e = E.copy()
    bad_e[0, 0] = 1.01
    with pytest.raises(InvalidModelError):
        Camera(K, bad_e, 8, 8)


def test_look_at_points_forward():
    cam = Camera.look_at([1.0, 2.0, 3.0], [1.0, 2.0, 10.0], 8, 8, 10.0, up=(0, -1, 0))
    np.testing.assert_allclose(cam.center, [1, 2, 3], atol=1e-12)
    t = cam.rotation @ np.array([1.0, 2.0, 10.0]) + cam.translation
    np.testing.assert_allclose(t, [0, 0, 7], atol=1e-12)
