import numpy as np
import pytest

from sginsert.field import gen_procedural
from sginsert.fh import build_fh
from sginsert.mesh import blob, icosphere
from sginsert.shadowfield import precompute_ssdf_field


@pytest.fixture(scope="session")
def sphere_mesh():
    return icosphere(3)


@pytest.fixture(scope="session")
def fine_sphere_mesh():
    return icosphere(4)


@pytest.fixture(scope="session")
def blob_mesh():
    return blob(3)


@pytest.fixture(scope="session")
def box_room():
    return gen_procedural("box_room", 48)


@pytest.fixture(scope="session")
def open_room():
    return gen_procedural("open_room", 48)


@pytest.fixture(scope="session")
def floor_plane():
    return gen_procedural("floor_plane", 48)


@pytest.fixture(scope="session")
def sphere_ssdf(sphere_mesh):
    """Quick-bake SSDF for unit tests (acceptance bakes the full config)."""
    return precompute_ssdf_field(sphere_mesh, direction_res=32, refine_steps=2)


@pytest.fixture(scope="session")
def fh_table():
    return build_fh(512, 64)


def rand_unit(rng, n=None):
    v = rng.normal(size=(n, 3) if n else 3)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)
