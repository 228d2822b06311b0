"""Shared scene/camera builders for the test suite."""

import numpy as np
import pytest

from splatedit.field import GaussianMixture
from splatedit.geometry import Camera, Intrinsics


def make_orbit_camera(azimuth, radius=4.0, size=48, elevation=0.1) -> Camera:
    """Inward-looking camera on a circular orbit around the origin."""
    center = radius * np.array([
        np.cos(elevation) * np.cos(azimuth),
        np.sin(elevation),
        np.cos(elevation) * np.sin(azimuth),
    ])
    fwd = -center / np.linalg.norm(center)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(fwd, right)
    R = np.stack([right, true_up, fwd])
    intr = Intrinsics(fx=1.1 * size, fy=1.1 * size, cx=size / 2, cy=size / 2,
                      width=size, height=size)
    return Camera(intrinsics=intr, rotation=R, translation=-R @ center)


def make_orbit(count, radius=4.0, size=48, elevation=0.1, jitter=0.0, rng=None):
    az = 2.0 * np.pi * np.arange(count) / count
    if jitter and rng is not None:
        az = az + rng.uniform(-jitter, jitter, count)
    return [make_orbit_camera(a, radius, size, elevation) for a in az]


def make_separated_mixture(rng, count, degree=0, extent=1.2, min_sep=0.45,
                           scale_range=(0.04, 0.12), opacity_range=(1.0, 6.0)):
    """Random scene with pairwise-separated means (keeps footprints disjoint)."""
    means = []
    sep = min_sep
    for _ in range(count):
        while True:
            p = rng.uniform(-extent, extent, 3)
            if np.linalg.norm(p) > extent:
                continue
            if all(np.linalg.norm(p - q) >= sep for q in means):
                means.append(p)
                break
    means = np.array(means)
    scales = rng.uniform(*scale_range, (count, 3))
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opac = rng.uniform(*opacity_range, count)
    basis = (degree + 1) ** 2
    sh = np.zeros((count, 3, basis))
    sh[:, :, 0] = rng.uniform(0.15, 0.95, (count, 3))
    if basis > 1:
        sh[:, :, 1:] = rng.uniform(-0.08, 0.08, (count, 3, basis - 1))
    return GaussianMixture(opac, means, scales, quats, sh, sh_degree=degree)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
