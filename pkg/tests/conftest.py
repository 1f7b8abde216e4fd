import numpy as np
import pytest

from satcity.geom_core import TriMesh
from satcity.synth import Box, BoxCity
from satcity.zmono_field import ZMonoField


def make_cube(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)):
    """Closed axis-aligned box with outward-facing triangles."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    t = np.array([
        [0, 2, 1], [0, 3, 2],  # bottom
        [4, 5, 6], [4, 6, 7],  # top
        [0, 1, 5], [0, 5, 4],  # y = y0
        [1, 2, 6], [1, 6, 5],  # x = x1
        [2, 3, 7], [2, 7, 6],  # y = y1
        [3, 0, 4], [3, 4, 7],  # x = x0
    ])
    return TriMesh(v, t)


@pytest.fixture
def cube():
    return make_cube()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_field():
    gen = np.random.default_rng(7)
    return ZMonoField(gen.uniform(-0.1, 0.1, size=(8, 8)), k=20.0, window=3)


@pytest.fixture
def two_box_city():
    """100 m square scene with two separated boxes."""
    return BoxCity(
        bounds=(0.0, 0.0, 100.0, 100.0),
        ground_z=0.0,
        boxes=[
            Box(10.0, 10.0, 40.0, 30.0, 20.0, (0.9, 0.1, 0.1)),
            Box(55.0, 50.0, 85.0, 90.0, 35.0, (0.1, 0.2, 0.9)),
        ],
        seed=3,
    )
