"""Shared fixtures for the deftrack test suite."""

import numpy as np
import pytest

from deftrack.geometry import CameraModel, Pose, so3_exp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def pinhole():
    """Plain pinhole camera, no distortion, VGA-ish."""
    return CameraModel("pinhole", 640, 480, 420.0, 420.0, 319.5, 239.5)


@pytest.fixture
def pinhole_distorted():
    return CameraModel("pinhole", 640, 480, 420.0, 420.0, 319.5, 239.5,
                       dist=(-0.12, 0.03, 1e-4, -2e-4, 0.0))


@pytest.fixture
def fisheye():
    return CameraModel("fisheye", 640, 480, 300.0, 300.0, 319.5, 239.5,
                       dist=(0.02, -0.005, 0.001, -0.0002))


def random_pose(rng, max_angle=0.5, max_trans=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = so3_exp(axis * rng.uniform(0.0, max_angle))
    t = rng.uniform(-max_trans, max_trans, size=3)
    return Pose(R, t)


@pytest.fixture
def make_pose(rng):
    return lambda **kw: random_pose(rng, **kw)
