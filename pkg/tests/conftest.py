import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splatstream.mesh import Camera, FrameVertices, TemplateMesh


@pytest.fixture
def unit_triangle():
    """Single axis-aligned triangle in the z=0 plane."""
    mesh = TemplateMesh(vertex_count=3, faces=np.array([[0, 1, 2]]))
    verts = FrameVertices(positions=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    return mesh, verts


@pytest.fixture
def big_triangle():
    mesh = TemplateMesh(vertex_count=3, faces=np.array([[0, 1, 2]]))
    verts = FrameVertices(positions=np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]]))
    return mesh, verts


@pytest.fixture
def small_camera():
    """8x8 identity-pose camera used by renderer unit tests."""
    return Camera(fx=50.0, fy=50.0, cx=4.0, cy=4.0, width=8, height=8, world_to_camera=np.eye(4))


def random_splats(rng, count, width=8, height=8, *, opacity_range=(0.2, 0.85)):
    """Random well-conditioned splats inside the viewport."""
    from splatstream.renderer import Splat2D

    splats = []
    for i in range(count):
        mean = rng.uniform([0.5, 0.5], [width - 1.5, height - 1.5])
        angle = rng.uniform(0, np.pi)
        rot = np.array(
            [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
        )
        lam = rng.uniform(0.8, 6.0, 2)
        cov = rot @ np.diag(lam) @ rot.T
        splats.append(
            Splat2D(
                node_id=i,
                mean2d=mean,
                cov2d=cov,
                depth=rng.uniform(0.5, 10.0),
                opacity=rng.uniform(*opacity_range),
                color=rng.uniform(0.05, 0.95, 3),
            )
        )
    return splats
