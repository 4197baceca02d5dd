import numpy as np
import pytest

from insenskit.domain import DomainSpec, GeometricCase, RegionShape, build_grid
from insenskit.errors import BandTooThin, GeometryUnsupported, VerificationFailed
from insenskit.insens_constructive import (
    build_cutoff,
    commutator_apply,
    construct_boundary_theta,
    construct_theta_in_omega,
    quintic_ramp,
    radial_cutoff,
)
from insenskit.pde import SpaceTimeField, apply_laplacian, field_from_callable, zero_field
from insenskit.insens_constructive import _constant_cutoff


def disk_grid(n, r_theta=0.13, r_omega=0.36):
    spec = DomainSpec(
        1.0,
        1.0,
        n,
        n,
        omega_region=RegionShape.disk(0.5, 0.5, r_omega),
        theta_region=RegionShape.disk(0.5, 0.5, r_theta),
        geometric_case=GeometricCase.INTERSECTING,
    )
    return build_grid(spec)


def annulus_grid(n):
    spec = DomainSpec(
        1.0,
        1.0,
        n,
        n,
        omega_region=RegionShape.annulus(0.5, 0.5, 0.11, 0.48),
        theta_region=RegionShape.disk(0.5, 0.5, 0.295),
        geometric_case=GeometricCase.INTERSECTING,
    )
    return build_grid(spec)


def bump(t, X, Y):
    return 6.0 * np.exp(-(((X - 0.5) ** 2) + (Y - 0.52) ** 2) / (2 * 0.09**2))


def windowed_core_bump(t, X, Y):
    rho = np.hypot(X - 0.5, Y - 0.5)
    up = quintic_ramp(np.array([(t - 0.55) / 0.12]))[0][0]
    down = quintic_ramp(np.array([(0.95 - t) / 0.12]))[0][0]
    return 40.0 * up * down * quintic_ramp((0.10 - rho) / 0.10)[0]


# -- cutoffs -------------------------------------------------------------------


def test_quintic_ramp_endpoint_identities():
    r, dr, ddr = quintic_ramp(np.array([0.0, 1.0]))
    assert np.array_equal(r, [0.0, 1.0])
    assert np.array_equal(dr, [0.0, 0.0])
    assert np.array_equal(ddr, [0.0, 0.0])
    r_half = quintic_ramp(np.array([0.5]))[0][0]
    assert np.isclose(r_half, 0.5)


def test_empty_zero_region_gives_constant_one():
    grid = disk_grid(25)
    eta = build_cutoff(grid, None, grid.spec.omega_region)
    assert np.all(eta.values == 1.0)
    assert np.all(eta.grad == 0.0)
    assert np.all(eta.lap == 0.0)


def test_cutoff_exact_on_zero_and_one_sets():
    grid = disk_grid(33)
    eta = build_cutoff(grid, grid.spec.theta_region, grid.spec.omega_region)
    assert np.all(eta.values[grid.mask_theta] == 0.0)
    assert np.all(eta.values[~grid.mask_omega] == 1.0)
    assert np.all((eta.values >= 0.0) & (eta.values <= 1.0))


def test_rect_cutoff_exact_on_zero_and_one_sets():
    spec = DomainSpec(
        1.0,
        1.0,
        33,
        33,
        omega_region=RegionShape.rect(0.15, 0.85, 0.15, 0.85),
        theta_region=RegionShape.rect(0.4, 0.6, 0.4, 0.6),
        geometric_case=GeometricCase.INTERSECTING,
    )
    grid = build_grid(spec)
    eta = build_cutoff(grid, spec.theta_region, spec.omega_region)
    assert np.all(eta.values[grid.mask_theta] == 0.0)
    assert np.all(eta.values[~grid.mask_omega] == 1.0)
    assert np.all((eta.values >= -1e-15) & (eta.values <= 1.0 + 1e-15))


def test_band_too_thin_raises():
    grid = disk_grid(15, r_theta=0.2, r_omega=0.3)
    with pytest.raises(BandTooThin):
        build_cutoff(grid, grid.spec.theta_region, grid.spec.omega_region)


def test_cutoff_unsupported_pair():
    spec = DomainSpec(
        1.0,
        1.0,
        21,
        21,
        omega_region=RegionShape.rect(0.1, 0.9, 0.1, 0.9),
        theta_region=RegionShape.disk(0.5, 0.5, 0.15),
        geometric_case=GeometricCase.INTERSECTING,
    )
    grid = build_grid(spec)
    with pytest.raises(GeometryUnsupported):
        build_cutoff(grid, spec.theta_region, spec.omega_region)


# -- commutators ----------------------------------------------------------------


def test_commutator_with_constant_one_vanishes(rng):
    grid = disk_grid(17)
    eta = _constant_cutoff(grid, 1.0)
    f = SpaceTimeField(rng.standard_normal((4, 17, 17)), 1.0)
    for mode in ("analytic", "discrete"):
        out = commutator_apply(eta, f, grid, mode=mode)
        assert np.all(out.values == 0.0)


def test_commutator_of_constant_field_gives_c_lap_eta():
    grid = disk_grid(33)
    eta = build_cutoff(grid, grid.spec.theta_region, grid.spec.omega_region)
    c = 2.75
    f = SpaceTimeField(np.full((3, 33, 33), c), 1.0)
    out = commutator_apply(eta, f, grid, mode="analytic")
    # grad f = 0 except at the Dirichlet ring (the zero ghosts), where eta is
    # constant anyway, so the band values are exactly c * lap(eta).
    band = (eta.grad[0] != 0) | (eta.grad[1] != 0) | (eta.lap != 0)
    assert np.allclose(out.values[0][band], c * eta.lap[band], rtol=0, atol=1e-12)


def test_commutator_support_confined_to_band(rng):
    grid = disk_grid(33)
    eta = build_cutoff(grid, grid.spec.theta_region, grid.spec.omega_region)
    f = SpaceTimeField(rng.standard_normal((3, 33, 33)), 1.0)
    out = commutator_apply(eta, f, grid, mode="analytic")
    band = (eta.grad[0] != 0) | (eta.grad[1] != 0) | (eta.lap != 0)
    interior = ~band
    interior[0, :] = interior[-1, :] = interior[:, 0] = interior[:, -1] = False
    assert np.all(out.values[:, interior] == 0.0)


def test_discrete_commutator_identity(rng):
    grid = disk_grid(33)
    eta = build_cutoff(grid, grid.spec.theta_region, grid.spec.omega_region)
    f = SpaceTimeField(rng.standard_normal((3, 33, 33)), 1.0)
    out = commutator_apply(eta, f, grid, mode="discrete")
    direct = apply_laplacian(grid, eta.values[None] * f.values) - eta.values[
        None
    ] * apply_laplacian(grid, f.values)
    scale = np.max(np.abs(direct))
    assert np.max(np.abs(out.values - direct)) <= 1e-10 * scale


def test_commutator_modes_agree_under_refinement():
    # Analytic and discrete evaluations converge to each other at O(h^2)
    # when the band is well resolved.
    errs = []
    for n in (33, 67):
        grid = disk_grid(n, r_theta=0.12, r_omega=0.42)
        eta = build_cutoff(grid, grid.spec.theta_region, grid.spec.omega_region)
        X, Y = grid.meshgrid()
        f = SpaceTimeField((np.sin(2.1 * X + 0.3) * np.cos(1.7 * Y))[None], 1.0)
        a = commutator_apply(eta, f, grid, mode="analytic")
        d = commutator_apply(eta, f, grid, mode="discrete")
        errs.append(np.max(np.abs(a.values - d.values)))
    assert np.log2(errs[0] / errs[1]) >= 1.5


# -- theta strictly inside omega --------------------------------------------------


def test_theta_in_omega_zero_source():
    grid = disk_grid(33)
    res = construct_theta_in_omega(grid, zero_field(grid, 8, 1.0))
    assert np.all(res.h.values == 0.0)
    assert np.all(res.z.values == 0.0)
    assert res.kernel_l1 == 0.0


def test_theta_in_omega_discrete_exactness():
    grid = disk_grid(33)
    xi = field_from_callable(grid, bump, 32, 1.0)
    res = construct_theta_in_omega(grid, xi, commutator="discrete")
    assert res.support_ok
    assert res.defects["z_sup_rel"] <= 1e-13
    assert res.kernel_l1 <= 1e-12 * res.kernel_scale
    assert res.defects["y_vs_eta_yxi_sup"] <= 1e-12


def test_theta_in_omega_source_inside_theta():
    grid = disk_grid(33)

    def inner_bump(t, X, Y):
        rho = np.hypot(X - 0.5, Y - 0.5)
        return 5.0 * quintic_ramp((0.12 - rho) / 0.12)[0]

    xi = field_from_callable(grid, inner_bump, 32, 1.0)
    res = construct_theta_in_omega(grid, xi, commutator="discrete")
    assert res.defects["z_sup_rel"] <= 1e-13
    assert res.kernel_l1 <= 1e-12 * max(res.kernel_scale, 1e-300)
    # On theta, eta = 0 and the commutator vanishes, so h = -xi there.
    h_field = res.h.embed(grid).values
    assert np.allclose(
        h_field[:, grid.mask_theta], -xi.values[:, grid.mask_theta], rtol=0, atol=1e-14
    )


def test_theta_in_omega_support_audit(rng):
    grid = disk_grid(33)
    xi = SpaceTimeField(rng.standard_normal((9, 33, 33)), 1.0)
    res = construct_theta_in_omega(grid, xi, commutator="discrete")
    h_field = res.h.embed(grid).values
    nonzero = np.any(h_field != 0.0, axis=0)
    assert np.all(grid.mask_omega[nonzero])


def test_theta_in_omega_analytic_refinement_order():
    errs = []
    for n, nt in ((51, 48), (101, 96)):
        spec = DomainSpec(
            1.0,
            1.0,
            n,
            n,
            omega_region=RegionShape.disk(0.5, 0.5, 0.38),
            theta_region=RegionShape.disk(0.5, 0.5, 0.12),
            geometric_case=GeometricCase.INTERSECTING,
        )
        grid = build_grid(spec)
        xi = field_from_callable(grid, bump, nt, 1.0)
        res = construct_theta_in_omega(grid, xi, commutator="analytic")
        errs.append(res.defects["y_vs_eta_yxi_sup"])
    assert np.log2(errs[0] / errs[1]) >= 1.5


# -- annular omega covering the theta boundary ------------------------------------


def test_boundary_theta_zero_source():
    grid = annulus_grid(65)
    res = construct_boundary_theta(grid, zero_field(grid, 8, 1.0))
    assert np.all(res.h.values == 0.0)
    assert np.all(res.z.values == 0.0)


def test_boundary_theta_windowed_source_defect():
    grid = annulus_grid(65)
    xi = field_from_callable(grid, windowed_core_bump, 96, 1.0)
    res = construct_boundary_theta(grid, xi, commutator="discrete")
    assert res.support_ok
    assert res.defects["z_off_theta_rel"] <= 1e-3
    h_field = res.h.embed(grid).values
    nonzero = np.any(h_field != 0.0, axis=0)
    assert np.all(grid.mask_omega[nonzero])


def test_boundary_theta_geometry_checks():
    grid = disk_grid(33)
    with pytest.raises(GeometryUnsupported):
        construct_boundary_theta(grid, zero_field(grid, 8, 1.0))
    spec = DomainSpec(
        1.0,
        1.0,
        33,
        33,
        omega_region=RegionShape.annulus(0.5, 0.5, 0.11, 0.48),
        theta_region=RegionShape.disk(0.5, 0.5, 0.295),
        geometric_case=GeometricCase.INTERSECTING,
    )
    grid2 = build_grid(spec)
    with pytest.raises(BandTooThin):
        # 33x33 leaves fewer than the 12 cells the nested bands need.
        construct_boundary_theta(grid2, zero_field(grid2, 8, 1.0))
