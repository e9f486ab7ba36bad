import numpy as np
import pytest

from fragpose.geometry import CameraIntrinsics


def cube_mesh_arrays(side=1.0, center=(0.0, 0.0, 0.0)):
    """Axis-aligned cube: 8 vertices, 12 triangles."""
    s = side / 2.0
    c = np.asarray(center, dtype=np.float64)
    verts = np.array([
        [-s, -s, -s], [s, -s, -s], [s, s, -s], [-s, s, -s],
        [-s, -s, s], [s, -s, s], [s, s, s], [-s, s, s],
    ]) + c
    tris = np.array([
        [0, 1, 2], [0, 2, 3],  # z = -s face
        [4, 6, 5], [4, 7, 6],  # z = +s face
        [0, 4, 5], [0, 5, 1],  # y = -s face
        [3, 2, 6], [3, 6, 7],  # y = +s face
        [0, 3, 7], [0, 7, 4],  # x = -s face
        [1, 5, 6], [1, 6, 2],  # x = +s face
    ], dtype=np.int64)
    return verts, tris


@pytest.fixture
def vga():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
