"""Shape-derivative kernel, the tracked functional, and the re-solve oracle.

The first-order variation of the tracked functional under a boundary
perturbation V is the boundary integral of (V.n) against the sensitivity
kernel k(x) = int_0^T dn y0 dn z0 dt, where (y0, z0) is the coupled cascade.
The kernel is computed from traces; an independent check re-solves the
problem on dilated rectangles and differences the functional values. The
oracle is restricted to rectangle-preserving face dilations so no mapped
solver is needed; data (omega, theta, sources, controls) stay fixed in
absolute coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy.ndimage import map_coordinates

from .domain import BoundaryGeometry, DomainSpec, Grid, PerturbationField, build_grid, normal_component
from .errors import DimensionMismatch, InvalidSpec, PerturbationTooLarge
from .pde import (
    BoundaryTrace,
    Control,
    SpaceTimeField,
    field_from_callable,
    neumann_trace,
    solve_cascade,
    solve_forward,
    time_weights,
)

SourceLike = Union[SpaceTimeField, Callable[[float, np.ndarray, np.ndarray], np.ndarray], None]


@dataclass(frozen=True, eq=False)
class SensitivityKernel:
    """Per-boundary-point value of int_0^T dn y dn z dt."""

    values: np.ndarray  # (nb,)


def evaluate_J(grid: Grid, y: SpaceTimeField) -> float:
    """One half of the space-time integral of y^2 over theta (trapezoidal in t)."""
    wt = time_weights(y.nt) * y.dt
    sq = np.einsum("n,nij->ij", wt, y.values**2)
    return float(0.5 * grid.cell_area * sq[grid.mask_theta].sum())


def sensitivity_kernel(y_trace: BoundaryTrace, z_trace: BoundaryTrace) -> SensitivityKernel:
    if y_trace.values.shape != z_trace.values.shape or y_trace.nt != z_trace.nt:
        raise DimensionMismatch("trace discretizations differ")
    wt = time_weights(y_trace.nt) * y_trace.dt
    return SensitivityKernel(np.einsum("n,nb,nb->b", wt, y_trace.values, z_trace.values))


def kernel_for(grid: Grid, xi: Optional[SpaceTimeField], h: Optional[Control]) -> SensitivityKernel:
    """Kernel of the cascade driven by (xi, h)."""
    y, z = solve_cascade(grid, xi, h)
    b = grid.boundary
    return sensitivity_kernel(neumann_trace(y, b, grid), neumann_trace(z, b, grid))


def directional_derivative(
    kernel: SensitivityKernel, v: PerturbationField, b: BoundaryGeometry
) -> float:
    """Boundary pairing of V.n with the kernel (the shape derivative)."""
    if kernel.values.shape[0] != b.n_points:
        raise DimensionMismatch("kernel does not match boundary geometry")
    return float(np.sum(b.weights * normal_component(v, b) * kernel.values))


def kernel_l1_norm(kernel: SensitivityKernel, b: BoundaryGeometry) -> float:
    return float(np.sum(b.weights * np.abs(kernel.values)))


# -- re-solve oracle on dilated rectangles -------------------------------------


def _dilated_spec(spec: DomainSpec, face: str, tau: float) -> tuple[DomainSpec, tuple[float, float]]:
    if face == "right":
        return replace(spec, lx=spec.lx + tau), (0.0, 0.0)
    if face == "left":
        return replace(spec, lx=spec.lx + tau), (-tau, 0.0)
    if face == "top":
        return replace(spec, ly=spec.ly + tau), (0.0, 0.0)
    if face == "bottom":
        return replace(spec, ly=spec.ly + tau), (0.0, -tau)
    raise InvalidSpec(f"unknown face {face!r}")


def _require_regions_inside(spec: DomainSpec, origin: tuple[float, float]):
    rect = (origin[0], origin[0] + spec.lx, origin[1], origin[1] + spec.ly)
    for name, region in (("omega", spec.omega_region), ("theta", spec.theta_region)):
        x0, x1, y0, y1 = region.bounds()
        if not (rect[0] < x0 and x1 < rect[1] and rect[2] < y0 and y1 < rect[3]):
            raise PerturbationTooLarge(f"{name} exits the dilated rectangle {rect}")


def _bilinear_sample(values: np.ndarray, ref: Grid, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample per-level nodal data at absolute points, zero on and past the boundary."""
    # Pad with the Dirichlet zero ring so interpolation decays to 0 at the wall.
    nt1 = values.shape[0]
    padded = np.pad(values, ((0, 0), (1, 1), (1, 1)))
    gx = (x - ref.xs[0]) / ref.hx + 1.0
    gy = (y - ref.ys[0]) / ref.hy + 1.0
    out = np.empty((nt1,) + x.shape)
    coords = np.stack([gx.ravel(), gy.ravel()])
    for n in range(nt1):
        out[n] = map_coordinates(padded[n], coords, order=1, mode="constant", cval=0.0).reshape(
            x.shape
        )
    return out


def _sources_on(grid: Grid, xi: SourceLike, ref: Optional[Grid], nt: int, t_horizon: float) -> Optional[SpaceTimeField]:
    if xi is None:
        return None
    if callable(xi):
        return field_from_callable(grid, xi, nt, t_horizon)
    X, Y = grid.meshgrid()
    return SpaceTimeField(_bilinear_sample(xi.values, ref, X, Y), t_horizon)


def _control_on(grid: Grid, h: Optional[Control], ref: Optional[Grid]) -> Optional[Control]:
    if h is None:
        return None
    X, Y = grid.meshgrid()
    full = _bilinear_sample(h.embed(ref).values, ref, X, Y)
    full *= grid.mask_omega[None, :, :]
    return Control.restrict(SpaceTimeField(full, h.t_horizon), grid)


def _clipped_theta_quadrature(grid: Grid, subsamples: int = 16):
    """Clipped-cell quadrature of theta: weights plus evaluation points.

    The node-indicator quadrature is discontinuous under grid dilation (a cell
    either counts fully or not at all, and fixed cells transport with the
    grid), which corrupts the tau-difference of the functional. Clipping each
    node cell against the region varies smoothly with tau and keeps the
    integration region fixed; evaluating border cells at the centroid of the
    clipped part (instead of the node) restores second-order accuracy there.
    Rectangles clip exactly; other shapes use per-cell subsampling.
    """
    region = grid.spec.theta_region
    if region.kind == "rect":
        x0, x1, y0, y1 = region.params
        lo_x = np.clip(grid.xs - grid.hx / 2, x0, x1)
        hi_x = np.clip(grid.xs + grid.hx / 2, x0, x1)
        lo_y = np.clip(grid.ys - grid.hy / 2, y0, y1)
        hi_y = np.clip(grid.ys + grid.hy / 2, y0, y1)
        weights = np.outer(hi_x - lo_x, hi_y - lo_y)
        cx = np.broadcast_to(0.5 * (lo_x + hi_x)[:, None], weights.shape)
        cy = np.broadcast_to(0.5 * (lo_y + hi_y)[None, :], weights.shape)
        return weights, cx, cy
    offs = (np.arange(subsamples) + 0.5) / subsamples - 0.5
    sx = grid.xs[:, None] + grid.hx * offs[None, :]
    sy = grid.ys[:, None] + grid.hy * offs[None, :]
    X = np.broadcast_to(sx[:, None, :, None], (grid.nx, grid.ny, subsamples, subsamples))
    Y = np.broadcast_to(sy[None, :, None, :], (grid.nx, grid.ny, subsamples, subsamples))
    inside = region.contains(X, Y)
    frac = inside.mean(axis=(2, 3))
    weights = frac * grid.cell_area
    with np.errstate(invalid="ignore"):
        cx = np.where(frac > 0, (X * inside).sum(axis=(2, 3)) / np.maximum(inside.sum(axis=(2, 3)), 1), 0.0)
        cy = np.where(frac > 0, (Y * inside).sum(axis=(2, 3)) / np.maximum(inside.sum(axis=(2, 3)), 1), 0.0)
    Xg, Yg = grid.meshgrid()
    cx = np.where(frac >= 1.0, Xg, cx)
    cy = np.where(frac >= 1.0, Yg, cy)
    return weights, cx, cy


def _oracle_functional(grid: Grid, y: SpaceTimeField) -> float:
    weights, cx, cy = _clipped_theta_quadrature(grid)
    active = weights > 0
    vals = _bilinear_sample(y.values, grid, cx[active], cy[active])
    wt = time_weights(y.nt) * y.dt
    sq = np.einsum("n,nk->k", wt, vals**2)
    return float(0.5 * np.sum(weights[active] * sq))


def _functional_on_dilated(
    spec: DomainSpec,
    xi: SourceLike,
    h: Optional[Control],
    face: str,
    tau: float,
    nt: int,
    t_horizon: float,
    ref: Optional[Grid],
) -> float:
    dspec, origin = _dilated_spec(spec, face, tau)
    _require_regions_inside(dspec, origin)
    grid = build_grid(dspec, origin=origin)
    xi_d = _sources_on(grid, xi, ref, nt, t_horizon)
    h_d = _control_on(grid, h, ref)
    y = solve_forward(grid, xi_d, h_d)
    return _oracle_functional(grid, y)


def finite_difference_dJ_components(
    spec: DomainSpec,
    xi: SourceLike,
    h: Optional[Control],
    v: PerturbationField,
    tau: float,
    nt: Optional[int] = None,
    t_horizon: Optional[float] = None,
) -> tuple[float, float, float]:
    """(J(Omega_tau), J(Omega_-tau), centered difference) by re-solving.

    ``v`` must be a pure face dilation (profile identically one). ``xi`` may be
    an analytic source callable f(t, X, Y), evaluated directly on each dilated
    grid, or a SpaceTimeField on the reference grid, resampled bilinearly.
    """
    if not v.is_pure_dilation:
        raise InvalidSpec("the re-solve oracle supports pure face dilations only")
    if tau <= 0:
        raise InvalidSpec("tau must be positive")
    if isinstance(xi, SpaceTimeField):
        nt, t_horizon = xi.nt, xi.t_horizon
    if h is not None:
        nt = h.nt if nt is None else nt
        t_horizon = h.t_horizon if t_horizon is None else t_horizon
    if nt is None or t_horizon is None:
        raise DimensionMismatch("callable xi needs explicit nt and t_horizon")
    ref = build_grid(spec) if (isinstance(xi, SpaceTimeField) or h is not None) else None
    j_plus = _functional_on_dilated(spec, xi, h, v.face, tau, nt, t_horizon, ref)
    j_minus = _functional_on_dilated(spec, xi, h, v.face, -tau, nt, t_horizon, ref)
    return j_plus, j_minus, (j_plus - j_minus) / (2.0 * tau)


def finite_difference_dJ(
    spec: DomainSpec,
    xi: SourceLike,
    h: Optional[Control],
    v: PerturbationField,
    tau: float,
    nt: Optional[int] = None,
    t_horizon: Optional[float] = None,
) -> float:
    """Centered difference (J(Omega_tau) - J(Omega_-tau)) / (2 tau) by re-solving."""
    return finite_difference_dJ_components(spec, xi, h, v, tau, nt=nt, t_horizon=t_horizon)[2]


def finite_difference_dJ_richardson(
    spec: DomainSpec,
    xi: SourceLike,
    h: Optional[Control],
    v: PerturbationField,
    taus: tuple[float, float] = (1e-2, 5e-3),
    nt: Optional[int] = None,
    t_horizon: Optional[float] = None,
) -> float:
    """Richardson extrapolation of the centered difference from two tau values.

    Expects taus = (tau, tau/2); eliminates the O(tau^2) term.
    """
    big, small = taus
    if not np.isclose(small * 2.0, big):
        raise InvalidSpec(f"richardson expects taus = (tau, tau/2), got {taus}")
    fd_big = finite_difference_dJ(spec, xi, h, v, big, nt=nt, t_horizon=t_horizon)
    fd_small = finite_difference_dJ(spec, xi, h, v, small, nt=nt, t_horizon=t_horizon)
    return (4.0 * fd_small - fd_big) / 3.0
