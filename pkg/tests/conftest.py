import numpy as np
import pytest

from fedsplat.core import SH_COEFFS, Camera, GaussianCloud


def random_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_cloud(rng, n, center=(0.0, 0.0, 3.0), spread=0.5, scale=(0.1, 0.3), sh_std=0.5,
                 bounds=None):
    """Small random cloud in front of a camera at the origin looking down +z."""
    pos = rng.uniform(-spread, spread, (n, 3)) + np.asarray(center)
    return GaussianCloud(pos, np.log(rng.uniform(*scale, (n, 3))), random_quaternions(rng, n),
                         rng.normal(0, sh_std, (n, SH_COEFFS, 3)), rng.normal(0, 1, n), bounds)


def small_camera(size=16, focal=20.0, eye=(0.2, 0.1, 0.0), target=(0.0, 0.0, 3.0), image_id=""):
    return Camera.look_at(eye, target, size, size, focal, up=(0, -1, 0), image_id=image_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_SPEC = dict(half_extent=1.5, camera_grid=6, n_buildings=1, image_size=22, focal=24.0,
                 n_validation=4)


def tiny_federation_config(**kw):
    from fedsplat.client import TrainConfig
    from fedsplat.federation import FederationConfig
    from fedsplat.merge import MergeConfig

    base = dict(n_clients=3, k_range=(12, 16), overlap_threshold=4, train=TrainConfig(iterations=40),
                merge=MergeConfig(epochs=1), eval_iterations=5, seed=0)
    base.update(kw)
    return FederationConfig(**base)


@pytest.fixture(scope="session")
def tiny_scene():
    from fedsplat.scene import SceneSpec, generate_scene

    return generate_scene(SceneSpec(**TINY_SPEC), 0)


@pytest.fixture(scope="session")
def tiny_packages(tiny_scene):
    from fedsplat.federation import train_clients

    return train_clients(tiny_scene, tiny_federation_config())


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
