import numpy as np
import pytest

from lnerf.geometry import CameraModel


def make_camera(fx=100.0, fy=100.0, cx=32.0, cy=24.0, width=64, height=48, pose=None):
    return CameraModel(fx, fy, cx, cy, width, height, np.eye(4) if pose is None else pose)


def rotation_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
