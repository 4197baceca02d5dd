import numpy as np
import pytest

from insenskit.domain import DomainSpec, GeometricCase, RegionShape, build_grid


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture(scope="session")
def grid9():
    """9x9 unit-square grid with disjoint omega / theta, used by the dense oracles."""
    spec = DomainSpec(
        lx=1.0,
        ly=1.0,
        nx=9,
        ny=9,
        omega_region=RegionShape.rect(0.15, 0.65, 0.15, 0.65),
        theta_region=RegionShape.rect(0.7, 0.95, 0.65, 0.95),
        geometric_case=GeometricCase.DISJOINT,
    )
    return build_grid(spec)


@pytest.fixture(scope="session")
def grid9_case2():
    spec = DomainSpec(
        lx=1.0,
        ly=1.0,
        nx=9,
        ny=9,
        omega_region=RegionShape.rect(0.15, 0.65, 0.15, 0.65),
        theta_region=RegionShape.rect(0.35, 0.95, 0.35, 0.95),
        geometric_case=GeometricCase.INTERSECTING,
    )
    return build_grid(spec)
