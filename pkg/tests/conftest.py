import numpy as np
import pytest

from tacshape.field import GridSDF
from tacshape.geometry import normalize_mesh
from tacshape.shapes import (box_sdf, cylinder_sdf, make_box, make_cylinder,
                             make_icosphere, sphere_sdf)


@pytest.fixture(scope="session")
def icosphere():
    return make_icosphere(0.5, 4)


@pytest.fixture(scope="session")
def icosphere_norm():
    mesh, record = normalize_mesh(make_icosphere(0.5, 4))
    return mesh, record


@pytest.fixture(scope="session")
def box_mesh():
    return make_box((0.8, 0.8, 0.8))


@pytest.fixture(scope="session")
def cylinder_mesh():
    return make_cylinder(0.3, 0.8)


@pytest.fixture(scope="session")
def sphere_field():
    f = GridSDF(resolutions=(16, 32, 64), active_levels=3)
    f.init_from_callable(lambda p: sphere_sdf(p, 0.5))
    return f


def fixture_meshes_normalized():
    """The three analytic fixtures, normalized, with their (scaled) SDFs."""
    out = []
    for name, mesh, sdf in (
            ("sphere", make_icosphere(0.5, 4), lambda p: sphere_sdf(p, 0.5)),
            ("box", make_box((0.8, 0.8, 0.8)), box_sdf),
            ("cylinder", make_cylinder(0.3, 0.8), cylinder_sdf)):
        norm, record = normalize_mesh(mesh)
        s = record.scale

        def scaled_sdf(p, sdf=sdf, s=s):
            return s * np.asarray(sdf(np.asarray(p) / s))

        out.append((name, norm, scaled_sdf))
    return out
