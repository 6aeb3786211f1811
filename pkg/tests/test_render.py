import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsplat.core import SH_C0, SH_COEFFS, Camera, Gaussian, GaussianCloud, rgb_to_sh_dc
from fedsplat.render import (BehindCameraError, EmptyCloudError, ProjectedGaussian, compute_alpha,
                             project_cloud, project_covariance, project_position, render,
                             render_backward, visible_count)

from conftest import random_cloud, random_quaternions, small_camera
from gradcheck import REL_TOL, gradient_sweep
from oracles import naive_render

K100 = np.array([[100.0, 0, 32], [0, 100, 32], [0, 0, 1]])
E0 = np.hstack([np.eye(3), np.zeros((3, 1))])


def axis_camera(size=9, focal=10.0):
    c = (size - 1) / 2
    return Camera(np.array([[focal, 0, c], [0, focal, c], [0, 0, 1]]), E0, size, size)


def solid(rgb, n=1):
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0] = rgb_to_sh_dc(rgb)
    return sh


def one_splat(pos, scale=0.05, logit=0.0, rgb=(1.0, 1.0, 1.0)):
    return GaussianCloud(np.array([pos], float), np.log(np.full((1, 3), scale)),
                         np.array([[1.0, 0, 0, 0]]), solid(rgb), np.array([logit]))


# ---------------------------------------------------------------------------
# projection


def test_project_on_axis_and_offset():
    cam = Camera(K100, E0, 64, 64)
    p = project_position(cam, [0, 0, 2])
    np.testing.assert_allclose(p.pixel, [32, 32])
    assert p.depth == 2 and p.in_front
    np.testing.assert_allclose(project_position(cam, [0.64, 0, 2]).pixel, [64, 32])


def test_project_behind_camera_is_flagged():
    cam = Camera(K100, E0, 64, 64)
    assert not project_position(cam, [0, 0, -1]).in_front
    assert not project_position(cam, [0, 0, 0.005]).in_front
    with pytest.raises(BehindCameraError):
        project_covariance(cam, Gaussian.create([0, 0, -1], [0.1, 0.1, 0.1]))


def test_project_matches_homogeneous_pipeline(rng):
    for _ in range(25):
        eye = rng.normal(size=3)
        cam = Camera.look_at(eye, eye + rng.normal(size=3), 40, 30, rng.uniform(10, 80))
        x = cam.center + 3 * (cam.rotation.T @ np.array([0, 0, 1.0])) + rng.normal(0, 0.5, 3)
        P = np.zeros((3, 4))
        P[:, :3] = cam.intrinsic
        V = np.vstack([cam.extrinsic, [0, 0, 0, 1]])
        h = P @ V @ np.append(x, 1)
        p = project_position(cam, x)
        np.testing.assert_allclose(p.pixel, h[:2] / h[2], rtol=1e-12)
        assert p.depth == pytest.approx(h[2], rel=1e-12)


def test_covariance_on_axis_isotropic():
    f, sigma, z = 50.0, 0.2, 4.0
    cam = Camera(np.array([[f, 0, 16], [0, f, 16], [0, 0, 1.0]]), E0, 32, 32)
    cov = project_covariance(cam, Gaussian.create([0, 0, z], [sigma] * 3))
    v = (f * sigma / z) ** 2 + 0.3
    np.testing.assert_allclose(cov, np.diag([v, v]), rtol=1e-12, atol=1e-14)


def test_covariance_low_pass_floor():
    cam = Camera(K100, E0, 64, 64)
    cov = project_covariance(cam, Gaussian.create([0.3, -0.2, 2], [1e-12] * 3))
    np.testing.assert_allclose(cov, 0.3 * np.eye(2), atol=1e-15)


def test_covariance_matches_numerical_jacobian(rng):
    for _ in range(10):
        cam = Camera.look_at(rng.normal(size=3), [0, 0, 5], 32, 32, rng.uniform(20, 60))
        g = Gaussian(rng.normal(0, 0.5, 3) + [0, 0, 5], np.log(rng.uniform(0.05, 0.5, 3)),
                     random_quaternions(rng, 1)[0], np.zeros((SH_COEFFS, 3)), 0.0)
        h = 1e-6
        Jn = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            Jn[:, k] = (project_position(cam, g.position + e).pixel
                        - project_position(cam, g.position - e).pixel) / (2 * h)
        ref = Jn @ g.covariance @ Jn.T + 0.3 * np.eye(2)
        np.testing.assert_allclose(project_covariance(cam, g), ref, rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------------------
# alpha


def test_alpha_examples():
    pg = ProjectedGaussian(np.array([5.0, 5.0]), np.eye(2), 1.0)
    assert compute_alpha(pg, 0.0, [5, 5]) == 0.5
    assert compute_alpha(pg, -50.0, [5, 5]) == 0.0
    assert compute_alpha(pg, 0.0, [7, 5]) == pytest.approx(0.5 * np.exp(-2), rel=1e-14)
    assert 0.5 * np.exp(-2) == pytest.approx(0.06767, abs=1e-5)


def test_alpha_uses_inverse_covariance():
    pg = ProjectedGaussian(np.zeros(2), np.diag([4.0, 1.0]), 1.0)
    assert compute_alpha(pg, 0.0, [2, 0]) == pytest.approx(0.5 * np.exp(-0.5), rel=1e-14)


def test_alpha_cap_and_floor():
    pg = ProjectedGaussian(np.zeros(2), np.eye(2), 1.0)
    assert compute_alpha(pg, 30.0, [0, 0]) == 0.99
    # 0.5 exp(-d^2/2) < 1/255 beyond d = sqrt(2 ln 127.5)
    assert compute_alpha(pg, 0.0, [3.2, 0]) == 0.0
    assert compute_alpha(pg, 0.0, [3.0, 0]) > 0.0


# ---------------------------------------------------------------------------
# forward


def test_single_splat_center_pixel():
    cam = axis_camera()
    out = render(cam, one_splat([0, 0, 2], logit=0.0, rgb=(1, 0, 0)))
    np.testing.assert_allclose(out.image[4, 4], [0.5, 0, 0], atol=1e-12)
    assert out.visibility.tolist() == [True]


def test_two_coincident_splats():
    cam = axis_camera()
    front = one_splat([0, 0, 2], logit=0.0, rgb=(1, 0, 0))
    back = one_splat([0, 0, 3], logit=60.0, rgb=(0, 0, 1))
    out = render(cam, back.concat(front))
    # the back splat is fully opaque but alpha is capped at 0.99
    np.testing.assert_allclose(out.image[4, 4], [0.5, 0, 0.5 * 0.99], atol=1e-12)
    assert out.transmittance[4, 4] == pytest.approx(0.5 * 0.01)


def test_empty_cloud_rejected():
    with pytest.raises(EmptyCloudError):
        render(axis_camera(), GaussianCloud.empty())


def test_transmittance_cutoff_stops_compositing():
    cam = axis_camera()
    layers = [one_splat([0, 0, 2 + 0.1 * k], logit=10.0, rgb=(1, 1, 1)) for k in range(5)]
    cloud = layers[0]
    for layer in layers[1:]:
        cloud = cloud.concat(layer)
    out = render(cam, cloud)
    # alpha 0.99 each: T = 1e-2, then 1e-4 (not below the cutoff), then the
    # third would push T to 1e-6 so compositing stops there
    assert out.transmittance[4, 4] == pytest.approx(1e-4)
    assert out.image[4, 4, 0] == pytest.approx(0.99 + 0.01 * 0.99, abs=1e-12)


def test_naive_oracle_random_scenes():
    rng = np.random.default_rng(7)
    for trial in range(15):
        n = rng.integers(1, 6)
        cloud = random_cloud(rng, n, scale=(0.05, 0.4))
        cam = small_camera(size=8, focal=rng.uniform(6, 14), eye=rng.normal(0, 0.3, 3))
        out = render(cam, cloud)
        img, trans, vis = naive_render(cam, cloud)
        assert np.max(np.abs(out.image - img)) < 1e-10, trial
        assert np.max(np.abs(out.transmittance - trans)) < 1e-10
        np.testing.assert_array_equal(out.visibility, vis)


def test_energy_conservation_white():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 8)
    cloud = cloud.replace(sh=solid((1, 1, 1), 8))
    out = render(small_camera(), cloud)
    np.testing.assert_allclose(out.image[..., 0] + out.transmittance, 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.permutations(range(6)))
def test_permutation_invariance(seed, perm):
    cloud = random_cloud(np.random.default_rng(seed), 6)
    cam = small_camera(size=12)
    a = render(cam, cloud)
    b = render(cam, cloud.subset(list(perm)))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.visibility[list(perm)], b.visibility)


def test_invisible_splats_contribute_nothing(rng):
    cloud = random_cloud(rng, 10, spread=1.5)
    cam = small_camera(size=12)
    out = render(cam, cloud)
    keep = np.flatnonzero(out.visibility)
    assert 0 < len(keep) < 10 or len(keep) == 10
    np.testing.assert_array_equal(render(cam, cloud.subset(keep)).image, out.image)


def test_behind_camera_never_visible():
    cam = axis_camera()
    cloud = one_splat([0, 0, 2]).concat(one_splat([0, 0, -2]))
    out = render(cam, cloud)
    assert out.visibility.tolist() == [True, False]


def test_visible_count_examples(rng):
    cam = axis_camera()
    behind = one_splat([0, 0, -1]).concat(one_splat([0.2, 0, -3]))
    assert visible_count(cam, behind) == 0
    assert visible_count(cam, one_splat([0, 0, 2])) == 1
    cloud = random_cloud(rng, 200, center=(0, 0, 2), spread=2.5)
    expected = 0
    for g in cloud:
        p = project_position(cam, g.position)
        expected += p.in_front and -0.5 <= p.pixel[0] < 8.5 and -0.5 <= p.pixel[1] < 8.5
    assert visible_count(cam, cloud) == expected


def test_project_cloud_is_depth_sorted(rng):
    cloud = random_cloud(rng, 12, spread=2.0)
    proj = project_cloud(small_camera(), cloud)
    depths = [p.view_depth for p in proj]
    assert depths == sorted(depths)


# ---------------------------------------------------------------------------
# backward


def test_zero_upstream_gives_zero_gradients(rng):
    cloud = random_cloud(rng, 5)
    cam = small_camera(size=8)
    g = render_backward(cam, cloud, np.zeros((8, 8, 3)))
    for arr in (g.positions, g.log_scales, g.rotations, g.sh, g.opacity_logits):
        assert not arr.any()


def test_backward_shape_mismatch(rng):
    cloud = random_cloud(rng, 3)
    with pytest.raises(ValueError):
        render_backward(small_camera(size=8), cloud, np.zeros((8, 7, 3)))


def test_single_splat_opacity_gradient():
    cam = axis_camera()
    o = 0.3
    cloud = one_splat([0.01, -0.02, 2], scale=0.08, logit=o, rgb=(0.8, 0.3, 0.1))
    up = np.zeros((9, 9, 3))
    up[4, 4, 0] = 1.0
    g = render_backward(cam, cloud, up)
    h = 1e-5
    plus = render(cam, cloud.replace(opacity_logits=[o + h])).image[4, 4, 0]
    minus = render(cam, cloud.replace(opacity_logits=[o - h])).image[4, 4, 0]
    fd = (plus - minus) / (2 * h)
    assert g.opacity_logits[0] == pytest.approx(fd, rel=1e-4)


def test_cached_state_matches_replay(rng):
    cloud = random_cloud(rng, 5)
    cam = small_camera(size=10)
    up = rng.normal(size=(10, 10, 3))
    a = render_backward(cam, cloud, up)
    b = render_backward(cam, cloud, up, state=render(cam, cloud).state)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.opacity_logits, b.opacity_logits)


def test_culled_splats_get_zero_gradient():
    cam = axis_camera()
    # the back splat is hidden behind an opaque stack and never reached
    cloud = one_splat([0, 0, 2], scale=5.0, logit=20)
    for z in (2.1, 2.2):
        cloud = cloud.concat(one_splat([0, 0, z], scale=5.0, logit=20))
    cloud = cloud.concat(one_splat([0, 0, 4], scale=0.2, logit=0.0, rgb=(1, 0, 0)))
    g = render_backward(cam, cloud, np.ones((9, 9, 3)))
    assert not render(cam, cloud).visibility[3]
    assert g.opacity_logits[3] == 0 and not g.positions[3].any()


@pytest.mark.parametrize("seed", [0, 1])
def test_full_gradient_sweep(seed):
    worst = gradient_sweep(seed, samples=25)
    assert set(worst) >= {"position", "scale", "rotation", "sh", "opacity", "ell", "tables",
                          "mlp_w0", "mlp_w1", "mlp_w2", "mlp_b0", "mlp_b1", "mlp_b2"}
    bad = {k: v for k, v in worst.items() if v >= REL_TOL}
    assert not bad, bad


def test_appearance_free_sh_gradient_equals_sh_hat(rng):
    cloud = random_cloud(rng, 4)
    cam = small_camera(size=8)
    g = render_backward(cam, cloud, rng.normal(size=(8, 8, 3)))
    assert g.sh_hat is g.sh and g.appearance is None
    assert SH_C0 > 0
