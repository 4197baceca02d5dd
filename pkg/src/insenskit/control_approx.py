"""Control synthesis by Tikhonov-regularized least squares on the trace operator.

The existence results behind these operations are non-quantitative (range
density of the control-to-trace map); discretely they are realized as

    min_h  w_tr (|L1 h - r1|^2 + |L2 h - r2|^2) + w_T |LT h - rT|^2 + alpha |h|^2

solved matrix-free by conjugate gradients on the normal equations in the
weighted control inner product, walking down a decreasing alpha schedule until
the recomputed residual meets its target. Every reported residual is
recomputed by an independent cascade solve with the returned control, never
taken from optimizer internals.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import GeometricCase, Grid
from .errors import DimensionMismatch, GeometryUnsupported, SolverFailure
from .pde import (
    BoundaryTrace,
    Control,
    SpaceTimeField,
    TerminalState,
    get_heat_operator,
    neumann_trace,
    solve_backward,
    solve_cascade,
    solve_forward,
    terminal_norm,
    time_weights,
    trace_inner,
    trace_norm,
)
from .shape import kernel_l1_norm, sensitivity_kernel


class TerminalMode(Enum):
    NONE = "none"
    APPROXIMATE = "approximate"
    NULL = "null"


@dataclass(frozen=True)
class RegularizationSchedule:
    """Decreasing Tikhonov parameters plus CG budget and residual target."""

    alphas: tuple
    cg_tol: float = 1e-10
    cg_maxit: int = 2000
    stop_eps: float = 0.0  # 0 means run the schedule to the end

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        if a.size == 0 or np.any(a <= 0) or np.any(np.diff(a) >= 0):
            raise DimensionMismatch("alphas must be strictly decreasing and positive")
        if self.cg_tol <= 0 or self.cg_maxit < 1:
            raise DimensionMismatch("cg_tol must be positive, cg_maxit >= 1")

    @classmethod
    def geometric(cls, start=1e-2, end=1e-10, factor=10.0, **kwargs) -> "RegularizationSchedule":
        alphas = []
        a = start
        while a >= end * (1 - 1e-12):
            alphas.append(a)
            a /= factor
        return cls(alphas=tuple(alphas), **kwargs)


@dataclass(frozen=True, eq=False)
class TraceTarget:
    """Trace pair to hit, optionally with a terminal-state channel."""

    f1: BoundaryTrace
    f2: BoundaryTrace
    y_t: Optional[TerminalState] = None
    terminal_mode: TerminalMode = TerminalMode.NONE
    w_trace: float = 1.0
    w_terminal: float = 10.0

    def __post_init__(self):
        if (self.y_t is not None) != (self.terminal_mode is not TerminalMode.NONE):
            raise DimensionMismatch("terminal target present iff terminal_mode != NONE")
        if self.w_trace <= 0 or self.w_terminal <= 0:
            raise DimensionMismatch("channel weights must be positive")


@dataclass(eq=False)
class ControlResult:
    """Synthesized control plus recomputed diagnostics."""

    h: Control
    residuals: dict
    kernel_l1_before: float
    kernel_l1_after: float
    alpha_used: Optional[float]
    cg_iterations: int
    wall_time: float
    converged: bool
    status: str
    history: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)


# -- matrix-free channel operator ---------------------------------------------


class _ChannelOperator:
    """Forward/adjoint action of the selected trace/terminal channels.

    Shares the factorized heat stepper; the adjoint is the exact algebraic
    transpose in the weighted inner products, so the normal operator is
    symmetric positive definite in the control inner product.
    """

    def __init__(self, grid: Grid, nt: int, t_horizon: float, use_traces: bool, use_terminal: bool):
        self.grid = grid
        self.nt = nt
        self.t_horizon = t_horizon
        self.use_traces = use_traces
        self.use_terminal = use_terminal
        self.op = get_heat_operator(grid, nt, t_horizon)
        wt = time_weights(nt) * (t_horizon / nt)
        self._w_trace = wt[:, None] * grid.boundary.weights[None, :]
        self._w_ctrl = wt[:, None] * np.full((1, grid.n_omega), grid.cell_area)
        self._theta_flat = grid.mask_theta.ravel().astype(float)

    def control_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.einsum("ni,ni->", self._w_ctrl * a, b))

    def forward(self, hvals: np.ndarray):
        src = np.zeros((self.nt + 1, self.grid.n_nodes))
        src[:, self.grid.omega_flat] = hvals
        y = self.op.march(src)
        t1 = t2 = term = None
        if self.use_traces:
            t1 = (self.op.trace_matrix @ y.T).T
            z = self.op.march((y * self._theta_flat[None, :])[::-1])[::-1]
            t2 = (self.op.trace_matrix @ z.T).T
        if self.use_terminal:
            term = y[self.nt].copy()
        return t1, t2, term

    def adjoint(self, t1, t2, term) -> np.ndarray:
        a = np.zeros((self.nt + 1, self.grid.n_nodes))
        if self.use_traces:
            a += (self.op.trace_matrix.T @ (self._w_trace * t1).T).T
            c = (self.op.trace_matrix.T @ (self._w_trace * t2).T).T
            a += self.op.march_transpose(c[::-1])[::-1] * self._theta_flat[None, :]
        if self.use_terminal:
            a[self.nt] += self.grid.cell_area * term
        u = self.op.march_transpose(a)
        return u[:, self.grid.omega_flat] / self._w_ctrl

    def normal_apply(self, hvals: np.ndarray, weights: tuple, alpha: float) -> np.ndarray:
        w_tr, w_term = weights
        t1, t2, term = self.forward(hvals)
        out = self.adjoint(
            w_tr * t1 if t1 is not None else None,
            w_tr * t2 if t2 is not None else None,
            w_term * term if term is not None else None,
        )
        out += alpha * hvals
        return out


class _ShiftedNormalSolver:
    """CG on the normal equations for the whole alpha family at once.

    The Tikhonov systems (L^T W L + alpha I) h = b share the right-hand side,
    so one Lanczos recurrence on the unshifted normal operator (run in the
    weighted control inner product, with full reorthogonalization) yields the
    CG iterate for every alpha from the same Krylov basis. ``solve`` extends
    the basis on demand until the CG residual for the requested shift meets
    the tolerance; the total number of operator applications is capped by the
    caller's iteration budget.
    """

    def __init__(self, apply_unshifted: Callable, b: np.ndarray, weight: np.ndarray):
        self.apply = apply_unshifted
        self.shape = b.shape
        self.weight = weight.ravel()
        self.b_norm = float(np.sqrt(np.sum(self.weight * b.ravel() ** 2)))
        self.alphas_diag: list = []
        self.betas: list = []
        self.basis: list = []
        if self.b_norm > 0.0:
            self.basis.append(b.ravel() / self.b_norm)
        self.exhausted = self.b_norm == 0.0

    @property
    def steps(self) -> int:
        return len(self.alphas_diag)

    def _extend(self, count: int) -> None:
        for _ in range(count):
            if self.exhausted:
                return
            j = self.steps
            v = self.basis[j]
            w = self.apply(v.reshape(self.shape)).ravel()
            a_j = float(np.sum(self.weight * v * w))
            w -= a_j * v
            if j > 0:
                w -= self.betas[j - 1] * self.basis[j - 1]
            vmat = np.asarray(self.basis)
            for _ in range(2):  # two-pass reorthogonalization keeps it stable
                w -= vmat.T @ (vmat @ (self.weight * w))
            b_j = float(np.sqrt(max(np.sum(self.weight * w * w), 0.0)))
            self.alphas_diag.append(a_j)
            self.betas.append(b_j)
            if b_j <= 1e-14 * self.b_norm:
                self.exhausted = True
                return
            self.basis.append(w / b_j)

    def _solve_in_basis(self, alpha: float):
        import scipy.linalg as sla

        m = self.steps
        tm = (
            np.diag(self.alphas_diag)
            + np.diag(self.betas[: m - 1], 1)
            + np.diag(self.betas[: m - 1], -1)
        )
        rhs = np.zeros(m)
        rhs[0] = self.b_norm
        y = sla.solve(tm + alpha * np.eye(m), rhs, assume_a="sym")
        relres = 0.0 if self.exhausted else abs(self.betas[m - 1] * y[-1]) / self.b_norm
        return y, relres

    def solve(self, alpha: float, tol: float, max_total: int, block: int = 100):
        """CG iterate for this shift; extends the shared basis as needed."""
        if self.b_norm == 0.0:
            return np.zeros(self.shape), 0, 0.0
        if self.steps == 0:
            self._extend(min(block, max_total))
        while True:
            y, relres = self._solve_in_basis(alpha)
            if relres <= tol or self.exhausted:
                break
            if self.steps >= max_total:
                raise SolverFailure(
                    f"shifted CG exceeded {max_total} operator applications "
                    f"(relative residual {relres:.3e} > {tol:.1e} at alpha={alpha:.1e})"
                )
            self._extend(min(block, max_total - self.steps))
        x = (np.asarray(self.basis[: self.steps]).T @ y).reshape(self.shape)
        return x, self.steps, relres


# -- synthesis core -------------------------------------------------------------


def _recompute(
    grid: Grid,
    xi,
    h: Optional[Control],
    target: Optional[TraceTarget],
    want_terminal: bool,
    nt: Optional[int] = None,
    t_horizon: Optional[float] = None,
):
    """Independent cascade re-solve; returns traces, kernel data and residuals."""
    if xi is None and h is None:
        if nt is None and target is not None:
            nt, t_horizon = target.f1.nt, target.f1.t_horizon
        h = Control.zeros(grid, nt, t_horizon)
    y, z = solve_cascade(grid, xi, h)
    b = grid.boundary
    ty = neumann_trace(y, b, grid)
    tz = neumann_trace(z, b, grid)
    kernel = sensitivity_kernel(ty, tz)
    out = {
        "trace_y_norm": trace_norm(ty, b),
        "trace_z_norm": trace_norm(tz, b),
        "kernel_l1": kernel_l1_norm(kernel, b),
        "y": y,
        "z": z,
        "ty": ty,
        "tz": tz,
        "kernel": kernel,
    }
    if target is not None:
        r1 = BoundaryTrace(ty.values - target.f1.values, ty.t_horizon)
        r2 = BoundaryTrace(tz.values - target.f2.values, tz.t_horizon)
        out["res_trace_y"] = trace_norm(r1, b)
        out["res_trace_z"] = trace_norm(r2, b)
        misfit = target.w_trace * (
            trace_inner(r1, r1, b) + trace_inner(r2, r2, b)
        )
        total = out["res_trace_y"] + out["res_trace_z"]
        if want_terminal:
            dterm = TerminalState(y.values[-1] - target.y_t.values)
            out["res_terminal"] = terminal_norm(dterm, grid)
            misfit += target.w_terminal * out["res_terminal"] ** 2
            total += out["res_terminal"]
        out["misfit"] = misfit
        out["residual_total"] = total
    return out


def _synthesize(
    grid: Grid,
    xi: Optional[SpaceTimeField],
    target: TraceTarget,
    schedule: RegularizationSchedule,
    stop_predicate: Callable[[dict], bool],
    use_traces: bool = True,
):
    nt, t_horizon = target.f1.nt, target.f1.t_horizon
    want_terminal = target.terminal_mode is not TerminalMode.NONE
    chan = _ChannelOperator(grid, nt, t_horizon, use_traces, want_terminal)

    baseline = _recompute(grid, xi, None, target, want_terminal)
    r1 = target.f1.values - baseline["ty"].values
    r2 = target.f2.values - baseline["tz"].values
    rt = target.y_t.values.ravel() - baseline["y"].values[-1].ravel() if want_terminal else None

    weights = (target.w_trace, target.w_terminal)
    rhs = chan.adjoint(
        weights[0] * r1 if use_traces else np.zeros_like(r1),
        weights[0] * r2 if use_traces else np.zeros_like(r2),
        weights[1] * rt if want_terminal else None,
    )

    solver = _ShiftedNormalSolver(
        lambda v: chan.normal_apply(v, weights, 0.0), rhs, chan._w_ctrl
    )
    history = []
    alpha_used = None
    status = "schedule_exhausted"
    best = None
    t_start = time.perf_counter()
    for alpha in schedule.alphas:
        steps_before = solver.steps
        try:
            hvals, _, relres = solver.solve(alpha, schedule.cg_tol, schedule.cg_maxit)
        except SolverFailure:
            if best is None:
                raise
            status = f"cg_budget_exhausted@alpha={alpha:.1e}"
            break
        h = Control(hvals, t_horizon)
        rec = _recompute(grid, xi, h, target, want_terminal)
        history.append(
            {
                "alpha": alpha,
                "cg_iters": solver.steps - steps_before,
                "cg_relres": relres,
                "misfit": rec["misfit"],
                "residual_total": rec["residual_total"],
                "kernel_l1": rec["kernel_l1"],
            }
        )
        best = (h, rec)
        alpha_used = alpha
        if stop_predicate(rec):
            status = "met"
            break
    wall = time.perf_counter() - t_start
    h, rec = best
    return h, rec, baseline, history, alpha_used, solver.steps, wall, status


def _result_from(h, rec, baseline, history, alpha_used, iters, wall, status, want_terminal) -> ControlResult:
    residuals = {
        "trace_y": rec.get("res_trace_y", rec["trace_y_norm"]),
        "trace_z": rec.get("res_trace_z", rec["trace_z_norm"]),
        "total": rec.get("residual_total", float("nan")),
    }
    if want_terminal:
        residuals["terminal"] = rec["res_terminal"]
    return ControlResult(
        h=h,
        residuals=residuals,
        kernel_l1_before=baseline["kernel_l1"],
        kernel_l1_after=rec["kernel_l1"],
        alpha_used=alpha_used,
        cg_iterations=iters,
        wall_time=wall,
        converged=(status == "met"),
        status=status,
        history=history,
        extras={},
    )


def _check_terminal_geometry(grid: Grid, allow_disjoint_experimental: bool) -> bool:
    if grid.spec.geometric_case is GeometricCase.INTERSECTING:
        return False
    if not allow_disjoint_experimental:
        raise GeometryUnsupported(
            "terminal channels need intersecting omega/theta; "
            "pass allow_disjoint_experimental=True to attempt anyway (reported, not claimed)"
        )
    return True


def approx_trace_control(
    grid: Grid,
    xi: Optional[SpaceTimeField],
    target: TraceTarget,
    schedule: RegularizationSchedule,
    stop_eps: Optional[float] = None,
    exact_projection_basis: Optional[Sequence[tuple[BoundaryTrace, BoundaryTrace]]] = None,
    allow_disjoint_experimental: bool = False,
) -> ControlResult:
    """Drive the cascade traces (and optionally the terminal state) to a target.

    Walks the alpha schedule until the recomputed residual sum
    |dn y - f1| + |dn z - f2| (+ |y(T) - y_T|) drops below ``stop_eps``
    (schedule.stop_eps when not given); otherwise returns the best effort
    flagged ``schedule_exhausted``.
    """
    want_terminal = target.terminal_mode is not TerminalMode.NONE
    experimental = False
    if want_terminal:
        experimental = _check_terminal_geometry(grid, allow_disjoint_experimental)
    eps = schedule.stop_eps if stop_eps is None else stop_eps
    stop = (lambda rec: rec["residual_total"] <= eps) if eps > 0 else (lambda rec: False)
    h, rec, baseline, history, alpha_used, iters, wall, status = _synthesize(
        grid, xi, target, schedule, stop
    )
    result = _result_from(h, rec, baseline, history, alpha_used, iters, wall, status, want_terminal)
    if experimental:
        result.extras["experimental_disjoint_terminal"] = True
        result.status = result.status + "+experimental"
        result.converged = False
    if exact_projection_basis:
        _exact_projection_correction(grid, xi, target, result, exact_projection_basis)
    return result


def _exact_projection_correction(grid, xi, target, result: ControlResult, basis) -> None:
    """Post-correct so the finite-dimensional projection of the traces is exact.

    For a basis {phi_i} of trace pairs, adds a correction in the span of the
    adjoint preimages L^T phi_i, solved from the small Gram system; afterwards
    <(dn y, dn z) - (f1, f2), phi_i> = 0 up to the dense solve.
    """
    nt, t_horizon = target.f1.nt, target.f1.t_horizon
    chan = _ChannelOperator(grid, nt, t_horizon, True, False)
    b = grid.boundary
    m = len(basis)
    psis = [chan.adjoint(p1.values, p2.values, None) for (p1, p2) in basis]
    images = [chan.forward(psi) for psi in psis]
    gram = np.empty((m, m))
    for i, (p1, p2) in enumerate(basis):
        for j, (im1, im2, _) in enumerate(images):
            gram[i, j] = trace_inner(BoundaryTrace(im1, t_horizon), p1, b) + trace_inner(
                BoundaryTrace(im2, t_horizon), p2, b
            )
    rec = _recompute(grid, xi, result.h, target, False)
    rhs = np.array(
        [
            trace_inner(BoundaryTrace(target.f1.values - rec["ty"].values, t_horizon), p1, b)
            + trace_inner(BoundaryTrace(target.f2.values - rec["tz"].values, t_horizon), p2, b)
            for (p1, p2) in basis
        ]
    )
    try:
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        coef = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    corrected = result.h.values + sum(c * psi for c, psi in zip(coef, psis))
    result.h = Control(corrected, t_horizon)
    rec2 = _recompute(grid, xi, result.h, target, False)
    defects = [
        trace_inner(BoundaryTrace(rec2["ty"].values - target.f1.values, t_horizon), p1, b)
        + trace_inner(BoundaryTrace(rec2["tz"].values - target.f2.values, t_horizon), p2, b)
        for (p1, p2) in basis
    ]
    result.residuals["trace_y"] = rec2["res_trace_y"]
    result.residuals["trace_z"] = rec2["res_trace_z"]
    result.residuals["total"] = rec2["residual_total"]
    result.kernel_l1_after = rec2["kernel_l1"]
    result.extras["projection_defects"] = defects


def zero_trace_target(grid: Grid, nt: int, t_horizon: float, **kwargs) -> TraceTarget:
    nb = grid.boundary.n_points
    zero = BoundaryTrace(np.zeros((nt + 1, nb)), t_horizon)
    return TraceTarget(f1=zero, f2=zero, **kwargs)


def approx_insensitize(
    grid: Grid,
    xi: Optional[SpaceTimeField],
    eps: float,
    schedule: RegularizationSchedule,
    nt: Optional[int] = None,
    t_horizon: Optional[float] = None,
) -> ControlResult:
    """Reduce the L1 norm of the sensitivity kernel below eps.

    Zero trace targets; success is the recomputed kernel bound, and the
    Cauchy-Schwarz majorant |dn y| * |dn z| is reported alongside (the kernel
    bound follows from trace norms of order sqrt(eps)).
    """
    if eps <= 0:
        raise DimensionMismatch("eps must be positive")
    if xi is not None:
        nt, t_horizon = xi.nt, xi.t_horizon
    if nt is None or t_horizon is None:
        raise DimensionMismatch("need nt and t_horizon when xi is None")
    target = zero_trace_target(grid, nt, t_horizon)
    stop = lambda rec: rec["kernel_l1"] <= eps
    h, rec, baseline, history, alpha_used, iters, wall, status = _synthesize(
        grid, xi, target, schedule, stop
    )
    result = _result_from(h, rec, baseline, history, alpha_used, iters, wall, status, False)
    cs_bound = rec["trace_y_norm"] * rec["trace_z_norm"]
    result.extras["cauchy_schwarz_bound"] = cs_bound
    result.extras["trace_norm_sum"] = rec["trace_y_norm"] + rec["trace_z_norm"]
    result.extras["trace_sum_below_sqrt_eps"] = result.extras["trace_norm_sum"] <= np.sqrt(eps)
    return result


def null_control(
    grid: Grid,
    xi: Optional[SpaceTimeField],
    schedule: RegularizationSchedule,
    reduction: float = 1e-3,
    nt: Optional[int] = None,
    t_horizon: Optional[float] = None,
) -> ControlResult:
    """Terminal-only least squares driving |y(T)| below ``reduction`` x baseline.

    The discrete null control is approximate by nature; the achieved relative
    terminal norm is reported, never claimed exact.
    """
    if xi is not None:
        nt, t_horizon = xi.nt, xi.t_horizon
    if nt is None or t_horizon is None:
        raise DimensionMismatch("need nt and t_horizon when xi is None")
    baseline_y = solve_forward(grid, xi, None) if xi is not None else None
    base_term = (
        terminal_norm(TerminalState(baseline_y.values[-1]), grid) if baseline_y is not None else 0.0
    )
    target = zero_trace_target(
        grid,
        nt,
        t_horizon,
        y_t=TerminalState(np.zeros((grid.nx, grid.ny))),
        terminal_mode=TerminalMode.NULL,
        w_terminal=1.0,
    )
    if base_term == 0.0:
        zero = Control.zeros(grid, nt, t_horizon)
        rec = _recompute(grid, xi, zero, target, True)
        res = _result_from(zero, rec, rec, [], None, 0, 0.0, "met", True)
        res.extras["terminal_reduction"] = 0.0
        return res
    threshold = reduction * base_term
    stop = lambda rec: rec["res_terminal"] <= threshold
    h, rec, baseline, history, alpha_used, iters, wall, status = _synthesize(
        grid, xi, target, schedule, stop, use_traces=False
    )
    result = _result_from(h, rec, baseline, history, alpha_used, iters, wall, status, True)
    result.extras["terminal_baseline"] = base_term
    result.extras["terminal_reduction"] = rec["res_terminal"] / base_term
    return result


def insensitize_with_terminal(
    grid: Grid,
    xi: Optional[SpaceTimeField],
    eps_kernel: float,
    schedule: RegularizationSchedule,
    terminal_mode: TerminalMode = TerminalMode.APPROXIMATE,
    y_t: Optional[TerminalState] = None,
    eps_terminal: Optional[float] = None,
    null_reduction: float = 1e-3,
    w_trace: float = 1.0,
    w_terminal: float = 10.0,
    allow_disjoint_experimental: bool = False,
) -> ControlResult:
    """Insensitize while also controlling y(T) (intersecting geometry).

    Approximate mode: one augmented solve with both criteria on recomputed
    values. Null mode: two stages, a null control for xi followed by a trace
    solve for the shifted targets of the residual system, keeping y(T) pinned;
    the combined control is returned and re-verified on the full system.
    """
    if terminal_mode is TerminalMode.NONE:
        raise DimensionMismatch("terminal_mode NONE makes no sense here; use approx_insensitize")
    experimental = _check_terminal_geometry(grid, allow_disjoint_experimental)
    if xi is None:
        raise DimensionMismatch("xi is required")
    nt, t_horizon = xi.nt, xi.t_horizon

    if terminal_mode is TerminalMode.APPROXIMATE:
        if y_t is None or eps_terminal is None:
            raise DimensionMismatch("approximate terminal mode needs y_t and eps_terminal")
        target = zero_trace_target(
            grid,
            nt,
            t_horizon,
            y_t=y_t,
            terminal_mode=TerminalMode.APPROXIMATE,
            w_trace=w_trace,
            w_terminal=w_terminal,
        )
        stop = lambda rec: rec["kernel_l1"] <= eps_kernel and rec["res_terminal"] <= eps_terminal
        h, rec, baseline, history, alpha_used, iters, wall, status = _synthesize(
            grid, xi, target, schedule, stop
        )
        result = _result_from(h, rec, baseline, history, alpha_used, iters, wall, status, True)
    else:
        t0 = time.perf_counter()
        nc = null_control(grid, xi, schedule, reduction=null_reduction)
        y_nc = solve_forward(grid, xi, nc.h)
        z_nc = solve_backward(
            grid, SpaceTimeField(y_nc.values * grid.mask_theta[None, :, :], t_horizon)
        )
        b = grid.boundary
        nc_ty = neumann_trace(y_nc, b, grid)
        nc_tz = neumann_trace(z_nc, b, grid)
        # Shifted targets for the homogeneous residual system: by linearity
        # the stage residuals equal the full-system traces and terminal norm.
        tgt = TraceTarget(
            f1=BoundaryTrace(-nc_ty.values, t_horizon),
            f2=BoundaryTrace(-nc_tz.values, t_horizon),
            y_t=TerminalState(-y_nc.values[-1]),
            terminal_mode=TerminalMode.APPROXIMATE,
            w_trace=w_trace,
            w_terminal=w_terminal,
        )
        base_term = nc.extras.get("terminal_baseline", 1.0)
        term_threshold = null_reduction * base_term

        def stop(rec_stage: dict) -> bool:
            full_ty = BoundaryTrace(rec_stage["ty"].values + nc_ty.values, t_horizon)
            full_tz = BoundaryTrace(rec_stage["tz"].values + nc_tz.values, t_horizon)
            full_kernel = kernel_l1_norm(sensitivity_kernel(full_ty, full_tz), b)
            rec_stage["kernel_l1_full"] = full_kernel
            return full_kernel <= eps_kernel and rec_stage["res_terminal"] <= term_threshold

        h1, rec, _, history, alpha_used, iters, wall, status = _synthesize(
            grid, None, tgt, schedule, stop
        )
        combined = Control(nc.h.values + h1.values, t_horizon)
        full = _recompute(grid, xi, combined, None, False)
        term_now = terminal_norm(TerminalState(full["y"].values[-1]), grid)
        result = ControlResult(
            h=combined,
            residuals={
                "trace_y": full["trace_y_norm"],
                "trace_z": full["trace_z_norm"],
                "terminal": term_now,
                "total": full["trace_y_norm"] + full["trace_z_norm"] + term_now,
            },
            kernel_l1_before=_recompute(grid, xi, None, None, False)["kernel_l1"],
            kernel_l1_after=full["kernel_l1"],
            alpha_used=alpha_used,
            cg_iterations=nc.cg_iterations + iters,
            wall_time=time.perf_counter() - t0,
            converged=(status == "met"),
            status=status,
            history=history,
            extras={
                "null_stage": nc,
                "stage1_control": h1,
                "terminal_baseline": base_term,
                "terminal_reduction": term_now / max(base_term, 1e-300),
            },
        )
    if experimental:
        result.extras["experimental_disjoint_terminal"] = True
        result.status += "+experimental"
        result.converged = False
    return result
