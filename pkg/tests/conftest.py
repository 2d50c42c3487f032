import numpy as np
import pytest

from msfm.model import Camera, make_intrinsics
from msfm.synth import SceneSpec, generate_scene


def random_rotation(rng):
    A = rng.normal(size=(3, 3))
    Q, _ = np.linalg.qr(A)
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    return Q


def random_camera(rng, image_id=0, focal=900.0, size=(1024, 768)):
    return Camera(
        K=make_intrinsics(focal, size[0] / 2.0, size[1] / 2.0),
        R=random_rotation(rng),
        t=rng.normal(size=3),
        image_id=image_id,
    )


@pytest.fixture(scope="session")
def tiny_scene():
    """10 cameras, noise free, full visibility: exact-geometry checks."""
    return generate_scene(SceneSpec(n_cameras=10, n_points=300, seed=11))


@pytest.fixture(scope="session")
def ring_scene():
    """20-camera ring with realistic noise and partial visibility."""
    return generate_scene(SceneSpec(
        n_cameras=20, n_points=1200, visibility_fraction=0.55,
        pixel_noise=0.5, descriptor_noise=4.0, seed=23))
