"""Discrete heat solves, the forward-backward cascade and the trace operator.

Space: 5-point Laplacian on the interior tensor grid with homogeneous
Dirichlet data. Time: Crank-Nicolson with sources sampled at time levels, so
the trapezoidal rule is the natural quadrature for all dt-weighted inner
products. Per-step systems share one sparse LU factorization per
(grid, Nt, T) triple.

The transpose of the control-to-trace map is the algebraic transpose of the
discrete forward map (reversed march, each linear step transposed), weighted
by the discrete inner products: (dt x dsigma) on traces, (dt x hx*hy) on
controls, (hx*hy) on terminal states. This is what makes the adjoint
identities hold to machine precision, which the regularized least-squares
synthesis relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import BoundaryGeometry, Grid
from .errors import DimensionMismatch, SolverFailure


def time_weights(nt: int) -> np.ndarray:
    """Trapezoidal weights over nt+1 levels (0.5 at the ends)."""
    w = np.ones(nt + 1)
    w[0] = w[-1] = 0.5
    return w


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Scalar field on (Nt+1 time levels) x (interior nodes); level 0 is t=0."""

    values: np.ndarray  # (nt+1, nx, ny)
    t_horizon: float

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DimensionMismatch(f"field values must be 3d, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise SolverFailure("field contains non-finite values")

    @property
    def nt(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.t_horizon / self.nt

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_horizon, self.nt + 1)

    def terminal(self) -> "TerminalState":
        return TerminalState(values=self.values[-1].copy())


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    """Values on (Nt+1 time levels) x boundary points."""

    values: np.ndarray  # (nt+1, nb)
    t_horizon: float

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionMismatch(f"trace values must be 2d, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise SolverFailure("trace contains non-finite values")

    @property
    def nt(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.t_horizon / self.nt


@dataclass(frozen=True, eq=False)
class Control:
    """Space-time control supported on the omega nodes."""

    values: np.ndarray  # (nt+1, n_omega)
    t_horizon: float

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionMismatch(f"control values must be 2d, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise SolverFailure("control contains non-finite values")

    @property
    def nt(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.t_horizon / self.nt

    def embed(self, grid: Grid) -> SpaceTimeField:
        """Zero-extend onto the full grid as h * 1_omega."""
        if self.values.shape[1] != grid.n_omega:
            raise DimensionMismatch(
                f"control has {self.values.shape[1]} columns, omega has {grid.n_omega} nodes"
            )
        full = np.zeros((self.nt + 1, grid.n_nodes))
        full[:, grid.omega_flat] = self.values
        return SpaceTimeField(full.reshape(self.nt + 1, grid.nx, grid.ny), self.t_horizon)

    @classmethod
    def zeros(cls, grid: Grid, nt: int, t_horizon: float) -> "Control":
        return cls(np.zeros((nt + 1, grid.n_omega)), t_horizon)

    @classmethod
    def restrict(cls, field: SpaceTimeField, grid: Grid) -> "Control":
        flat = field.values.reshape(field.nt + 1, grid.n_nodes)
        return cls(flat[:, grid.omega_flat].copy(), field.t_horizon)


@dataclass(frozen=True, eq=False)
class TerminalState:
    """Interior-node values at t = T."""

    values: np.ndarray  # (nx, ny)

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise SolverFailure("terminal state contains non-finite values")


def _check_same_clock(a, b):
    if a.nt != b.nt or abs(a.t_horizon - b.t_horizon) > 1e-14 * max(1.0, a.t_horizon):
        raise DimensionMismatch(
            f"incompatible time discretizations: (nt={a.nt}, T={a.t_horizon}) vs (nt={b.nt}, T={b.t_horizon})"
        )


def laplacian_matrix(grid: Grid) -> sp.csr_matrix:
    """5-point Dirichlet Laplacian on the interior nodes (lexicographic, i-major)."""
    key = "laplacian"
    mat = grid._caches.get(key)
    if mat is None:
        ex = np.ones(grid.nx)
        ey = np.ones(grid.ny)
        dxx = sp.diags([ex[:-1], -2 * ex, ex[:-1]], [-1, 0, 1]) / grid.hx**2
        dyy = sp.diags([ey[:-1], -2 * ey, ey[:-1]], [-1, 0, 1]) / grid.hy**2
        mat = (sp.kron(dxx, sp.identity(grid.ny)) + sp.kron(sp.identity(grid.nx), dyy)).tocsr()
        grid._caches[key] = mat
    return mat


def apply_laplacian(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Discrete Laplacian of nodal data (..., nx, ny) with zero Dirichlet ghosts."""
    flat = values.reshape(-1, grid.n_nodes)
    out = (laplacian_matrix(grid) @ flat.T).T
    return out.reshape(values.shape)


class HeatOperator:
    """Factorized Crank-Nicolson stepper for one (grid, Nt, T) triple.

    Read-only after construction; concurrent solves may share it.
    """

    def __init__(self, grid: Grid, nt: int, t_horizon: float):
        if nt < 1:
            raise DimensionMismatch("need nt >= 1")
        self.grid = grid
        self.nt = nt
        self.t_horizon = float(t_horizon)
        self.dt = self.t_horizon / nt
        n = grid.n_nodes
        self.laplacian = laplacian_matrix(grid)
        ident = sp.identity(n, format="csc")
        try:
            self._lu = spla.splu((ident - 0.5 * self.dt * self.laplacian).tocsc())
        except RuntimeError as exc:  # pragma: no cover
            raise SolverFailure(f"factorization failed: {exc}") from exc
        self._b_plus = (ident + 0.5 * self.dt * self.laplacian).tocsr()
        # Boundary trace operator: one-sided second-order stencil along the
        # inward normal, assembled sparse so the transpose is structural.
        bg = grid.boundary
        nb = bg.n_points
        rows = np.repeat(np.arange(nb), 2)
        cols = np.empty(2 * nb, dtype=int)
        vals = np.empty(2 * nb)
        flat1 = bg.idx1[:, 0] * grid.ny + bg.idx1[:, 1]
        flat2 = bg.idx2[:, 0] * grid.ny + bg.idx2[:, 1]
        cols[0::2] = flat1
        cols[1::2] = flat2
        vals[0::2] = -4.0 / (2.0 * bg.h_axis)
        vals[1::2] = 1.0 / (2.0 * bg.h_axis)
        self.trace_matrix = sp.csr_matrix((vals, (rows, cols)), shape=(nb, n))

    def march(self, sources: np.ndarray) -> np.ndarray:
        """Forward CN march from zero initial state; sources at levels (nt+1, n)."""
        nt, n = self.nt, self.grid.n_nodes
        states = np.zeros((nt + 1, n))
        half_dt = 0.5 * self.dt
        for k in range(nt):
            rhs = self._b_plus @ states[k] + half_dt * (sources[k] + sources[k + 1])
            states[k + 1] = self._lu.solve(rhs)
        if not np.isfinite(states).all():
            raise SolverFailure("time march produced non-finite values")
        return states

    def march_transpose(self, weights: np.ndarray) -> np.ndarray:
        """Exact algebraic transpose of :meth:`march` (Euclidean pairing).

        Given per-level weights p on the states, returns g with
        <march(s), p> = <s, g> for every source history s. Implemented as the
        reversed march nu^n = K(p^n + B nu^{n+1}) with K the factorized step
        inverse and B the explicit half-step; g averages adjacent nu levels
        exactly as the forward march averages adjacent sources.
        """
        nt, n = self.nt, self.grid.n_nodes
        nu = np.zeros((nt + 2, n))
        for k in range(nt, 0, -1):
            nu[k] = self._lu.solve(weights[k] + self._b_plus @ nu[k + 1])
        g = np.empty((nt + 1, n))
        half_dt = 0.5 * self.dt
        g[0] = half_dt * nu[1]
        for k in range(1, nt):
            g[k] = half_dt * (nu[k] + nu[k + 1])
        g[nt] = half_dt * nu[nt]
        return g


def get_heat_operator(grid: Grid, nt: int, t_horizon: float) -> HeatOperator:
    key = ("heat_op", nt, float(t_horizon))
    op = grid._caches.get(key)
    if op is None:
        op = HeatOperator(grid, nt, t_horizon)
        grid._caches[key] = op
    return op


def _flat(field: SpaceTimeField, grid: Grid) -> np.ndarray:
    return field.values.reshape(field.nt + 1, grid.n_nodes)


def _unflat(values: np.ndarray, grid: Grid, t_horizon: float) -> SpaceTimeField:
    return SpaceTimeField(values.reshape(values.shape[0], grid.nx, grid.ny), t_horizon)


def _clock_of(xi: Optional[SpaceTimeField], h: Optional[Control]):
    if xi is None and h is None:
        raise DimensionMismatch("need at least one of xi, h to fix the time discretization")
    if xi is not None and h is not None:
        _check_same_clock(xi, h)
    ref = xi if xi is not None else h
    return ref.nt, ref.t_horizon


def solve_forward(grid: Grid, xi: Optional[SpaceTimeField], h: Optional[Control]) -> SpaceTimeField:
    """Solve dy/dt - lap(y) = xi + h*1_omega, y(0) = 0, homogeneous Dirichlet."""
    nt, t_horizon = _clock_of(xi, h)
    op = get_heat_operator(grid, nt, t_horizon)
    sources = np.zeros((nt + 1, grid.n_nodes))
    if xi is not None:
        sources += _flat(xi, grid)
    if h is not None:
        sources[:, grid.omega_flat] += h.values
    return _unflat(op.march(sources), grid, t_horizon)


def solve_backward(grid: Grid, source: SpaceTimeField) -> SpaceTimeField:
    """Solve -dz/dt - lap(z) = source, z(T) = 0.

    Realized as the forward march on the time-reversed source, then reversed,
    so the time-reversal symmetry of the scheme is exact.
    """
    op = get_heat_operator(grid, source.nt, source.t_horizon)
    rev = _flat(source, grid)[::-1]
    return _unflat(op.march(rev)[::-1], grid, source.t_horizon)


def solve_cascade(
    grid: Grid, xi: Optional[SpaceTimeField], h: Optional[Control]
) -> tuple[SpaceTimeField, SpaceTimeField]:
    """Coupled system: forward y driven by xi + h*1_omega, backward z driven by 1_theta*y."""
    y = solve_forward(grid, xi, h)
    coupled = SpaceTimeField(y.values * grid.mask_theta[None, :, :], y.t_horizon)
    z = solve_backward(grid, coupled)
    return y, z


def neumann_trace(field: SpaceTimeField, b: BoundaryGeometry, grid: Grid) -> BoundaryTrace:
    """Outward normal derivative at each boundary point and time level.

    Uses the second-order one-sided stencil -(4 u1 - u2) / (2 h_axis) with the
    homogeneous boundary value implicit in the scheme.
    """
    op = get_heat_operator(grid, field.nt, field.t_horizon)
    vals = (op.trace_matrix @ _flat(field, grid).T).T
    return BoundaryTrace(vals, field.t_horizon)


# -- discrete inner products -------------------------------------------------


def trace_inner(a: BoundaryTrace, b: BoundaryTrace, bgeom: BoundaryGeometry) -> float:
    _check_same_clock(a, b)
    if a.values.shape[1] != bgeom.n_points:
        raise DimensionMismatch("trace does not match boundary geometry")
    wt = time_weights(a.nt) * a.dt
    return float(np.einsum("n,nb,b,nb->", wt, a.values, bgeom.weights, b.values))


def trace_norm(a: BoundaryTrace, bgeom: BoundaryGeometry) -> float:
    return float(np.sqrt(max(trace_inner(a, a, bgeom), 0.0)))


def trace_pair_norm(pair, bgeom: BoundaryGeometry) -> float:
    f, g = pair
    return float(np.sqrt(trace_inner(f, f, bgeom) + trace_inner(g, g, bgeom)))


def control_inner(a: Control, b: Control, grid: Grid) -> float:
    _check_same_clock(a, b)
    wt = time_weights(a.nt) * a.dt * grid.cell_area
    return float(np.einsum("n,ni,ni->", wt, a.values, b.values))


def control_norm(a: Control, grid: Grid) -> float:
    return float(np.sqrt(max(control_inner(a, a, grid), 0.0)))


def terminal_inner(a: TerminalState, b: TerminalState, grid: Grid) -> float:
    return float(grid.cell_area * np.sum(a.values * b.values))


def terminal_norm(a: TerminalState, grid: Grid) -> float:
    return float(np.sqrt(max(terminal_inner(a, a, grid), 0.0)))


# -- control-to-trace operator and transposes --------------------------------


def apply_L(grid: Grid, h: Control) -> tuple[BoundaryTrace, BoundaryTrace]:
    """L h = (dn y_h, dn z_h) for the cascade driven by h alone."""
    y, z = solve_cascade(grid, None, h)
    b = grid.boundary
    return neumann_trace(y, b, grid), neumann_trace(z, b, grid)


def apply_L_augmented(grid: Grid, h: Control) -> tuple[BoundaryTrace, BoundaryTrace, TerminalState]:
    """L h = (dn y_h, dn z_h, y_h(T))."""
    y, z = solve_cascade(grid, None, h)
    b = grid.boundary
    return neumann_trace(y, b, grid), neumann_trace(z, b, grid), y.terminal()


def _weighted_trace_to_weights(tr: BoundaryTrace, bgeom: BoundaryGeometry) -> np.ndarray:
    wt = time_weights(tr.nt) * tr.dt
    return tr.values * wt[:, None] * bgeom.weights[None, :]


def _transpose_core(
    grid: Grid,
    ty: BoundaryTrace,
    tz: BoundaryTrace,
    terminal: Optional[TerminalState],
) -> Control:
    _check_same_clock(ty, tz)
    nt, t_horizon = ty.nt, ty.t_horizon
    op = get_heat_operator(grid, nt, t_horizon)
    bt = op.trace_matrix.T
    b = grid.boundary
    theta_flat = grid.mask_theta.ravel()

    # z channel: (R F R D_theta)^T applied to the injected boundary weights.
    wz = (bt @ _weighted_trace_to_weights(tz, b).T).T
    zc = op.march_transpose(wz[::-1])[::-1] * theta_flat[None, :]

    wy = (bt @ _weighted_trace_to_weights(ty, b).T).T
    wy += zc
    if terminal is not None:
        wy[nt] += grid.cell_area * terminal.values.ravel()

    u = op.march_transpose(wy)
    hv = u[:, grid.omega_flat]
    hv /= (time_weights(nt) * (t_horizon / nt) * grid.cell_area)[:, None]
    return Control(hv, t_horizon)


def apply_L_transpose(grid: Grid, traces: tuple[BoundaryTrace, BoundaryTrace]) -> Control:
    """Exact transpose of :func:`apply_L` for the weighted discrete inner products."""
    return _transpose_core(grid, traces[0], traces[1], None)


def apply_L_augmented_transpose(
    grid: Grid, traces: tuple[BoundaryTrace, BoundaryTrace, TerminalState]
) -> Control:
    """Exact transpose of :func:`apply_L_augmented`; terminal channel weighted by hx*hy."""
    return _transpose_core(grid, traces[0], traces[1], traces[2])


# -- construction helpers -----------------------------------------------------


def field_from_callable(
    grid: Grid, f: Callable[[float, np.ndarray, np.ndarray], np.ndarray], nt: int, t_horizon: float
) -> SpaceTimeField:
    """Sample f(t, X, Y) at all time levels onto a SpaceTimeField."""
    X, Y = grid.meshgrid()
    times = np.linspace(0.0, t_horizon, nt + 1)
    vals = np.stack([np.broadcast_to(np.asarray(f(t, X, Y), dtype=float), X.shape).copy() for t in times])
    return SpaceTimeField(vals, t_horizon)


def zero_field(grid: Grid, nt: int, t_horizon: float) -> SpaceTimeField:
    return SpaceTimeField(np.zeros((nt + 1, grid.nx, grid.ny)), t_horizon)


def resample_time(field: SpaceTimeField, new_nt: int) -> SpaceTimeField:
    """Linear interpolation onto a new uniform level set (exact on shared levels)."""
    if new_nt == field.nt:
        return field
    told = field.times()
    tnew = np.linspace(0.0, field.t_horizon, new_nt + 1)
    flatv = field.values.reshape(field.nt + 1, -1)
    out = np.empty((new_nt + 1, flatv.shape[1]))
    for j, t in enumerate(tnew):
        k = min(int(np.searchsorted(told, t, side="right")) - 1, field.nt - 1)
        w = (t - told[k]) / (told[k + 1] - told[k])
        out[j] = (1.0 - w) * flatv[k] + w * flatv[k + 1]
    return SpaceTimeField(out.reshape((new_nt + 1,) + field.values.shape[1:]), field.t_horizon)
