import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mhsplat.scene import Camera, GaussianCloud  # noqa: E402


def random_cloud(n, rng, spread=0.5, scale=(0.05, 0.2)):
    cloud = GaussianCloud(
        rng.uniform(-spread, spread, (n, 3)),
        np.log(rng.uniform(*scale, (n, 3))),
        rng.normal(size=(n, 4)),
        rng.uniform(0, 1, (n, 3)),
        rng.normal(0, 1, n),
    )
    cloud.normalize_rotations()
    return cloud


def front_camera(size=32, distance=3.0, focal=None):
    f = focal if focal is not None else 1.25 * size
    return Camera(np.eye(3), np.array([0.0, 0.0, distance]), f, f, size / 2, size / 2, size, size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    from mhsplat.synth import SceneSpec, bake_dataset, camera_rig, generate_scene

    spec = SceneSpec(n_gaussians=300, seed=5)
    cloud = generate_scene(spec)
    rig = camera_rig(8, 3.5, resolution=(32, 32))
    return bake_dataset(cloud, rig, test_every=4)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
