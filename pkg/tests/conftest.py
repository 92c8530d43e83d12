import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from masslump.mesh import bisect, build_structured
from masslump.sparse import set_workers

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def single_worker():
    set_workers(1)
    yield
    set_workers(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[1, 2, 3], ids=["1d", "2d", "3d"])
def dim(request):
    return request.param


@pytest.fixture
def small_mesh(dim):
    """Coarse structured mesh in every dimension."""
    return build_structured(dim, {1: 3, 2: 2, 3: 1}[dim])


@pytest.fixture
def graded_mesh(dim):
    """Non-uniform conforming mesh obtained by local bisection near the origin."""
    mesh = build_structured(dim, {1: 2, 2: 1, 3: 1}[dim])
    for _ in range(3):
        centers = mesh.vertices[mesh.elements].mean(axis=1)
        marked = np.flatnonzero(np.all(centers < 0.4, axis=1))
        mesh = bisect(mesh, marked)
    return mesh
