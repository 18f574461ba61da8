import numpy as np
import pytest
from hypothesis import settings

from crackfield.mesh import DomainSpec, create_mesh, refine

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


def graded_mesh(dim=2, K=2.0, n0=4, seed=0, rounds=2, frac=0.3):
    """Small mesh refined at random cells, so it carries hanging vertices."""
    rng = np.random.default_rng(seed)
    mesh = create_mesh(DomainSpec(dim, K, n0))
    for _ in range(rounds):
        ids = mesh.active_ids
        pick = rng.choice(ids, size=max(1, int(frac * len(ids))), replace=False)
        refine(mesh, pick)
    return mesh


@pytest.fixture
def mesh2d():
    return graded_mesh(2)


@pytest.fixture
def mesh3d():
    return graded_mesh(3, n0=2, rounds=1, frac=0.25)
