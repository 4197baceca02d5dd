import numpy as np
import pytest

from insenskit.control_approx import RegularizationSchedule
from insenskit.domain import (
    DomainSpec,
    GeometricCase,
    PerturbationField,
    RegionShape,
    build_grid,
    normal_component,
)
from insenskit.errors import (
    AllDirectionsTangent,
    BadTimeDivision,
    NoConvergenceGuarantee,
    NoSolutionFound,
)
from insenskit.insens_exact_fd import (
    QLCSystem,
    assemble_QLC,
    build_gamma_targets,
    combine_controls,
    evaluate_U,
    exact_insensitize,
    gamma_identity_tensor,
    mu_of,
    orthonormalize_normal_traces,
    solve_lambda,
)
from insenskit.pde import (
    BoundaryTrace,
    Control,
    field_from_callable,
    neumann_trace,
    solve_cascade,
    time_weights,
)
from insenskit.shape import directional_derivative, kernel_for

T = 1.0


def ideal_system(m, c, bgeom, ell=None):
    q = np.zeros((m, 2 * m, 2 * m))
    for k in range(m):
        q[k, 2 * k, 2 * k + 1] = q[k, 2 * k + 1, 2 * k] = 1.0
    return QLCSystem(
        q=q,
        ell=np.zeros((m, 2 * m)) if ell is None else np.asarray(ell, dtype=float),
        c=np.asarray(c, dtype=float),
        basis=None,
        controls=None,
        control_traces=[None] * (2 * m),
        xi_traces=None,
        bgeom=bgeom,
        t_horizon=T,
        nt=8,
    )


# -- orthonormalization ---------------------------------------------------------


def test_single_constant_direction_normalizes_to_half(grid9):
    b = grid9.boundary
    v = PerturbationField.from_samples(np.ones(b.n_points))
    basis = orthonormalize_normal_traces([v], b)
    assert basis.m == 1
    assert np.allclose(basis.w[0], 0.5, rtol=1e-12)


def test_duplicate_directions_collapse(grid9):
    v = PerturbationField.face_dilation("right")
    basis = orthonormalize_normal_traces([v, v], b=grid9.boundary)
    assert basis.m == 1
    assert basis.dropped == (1,)


def test_orthogonal_faces(grid9):
    b = grid9.boundary
    basis = orthonormalize_normal_traces(
        [PerturbationField.face_dilation("right"), PerturbationField.face_dilation("top")], b
    )
    assert basis.m == 2
    g01 = np.sum(b.weights * basis.w[0] * basis.w[1])
    assert abs(g01) <= 1e-12


def test_all_tangent_raises(grid9):
    v = PerturbationField.from_samples(np.zeros(grid9.boundary.n_points))
    with pytest.raises(AllDirectionsTangent):
        orthonormalize_normal_traces([v, v], grid9.boundary)


def test_gram_orthonormality_random_directions(grid9, rng):
    b = grid9.boundary
    dirs = [PerturbationField.from_samples(rng.standard_normal(b.n_points)) for _ in range(4)]
    basis = orthonormalize_normal_traces(dirs, b)
    gram = np.einsum("ib,b,jb->ij", basis.w, b.weights, basis.w)
    assert np.max(np.abs(gram - np.eye(basis.m))) <= 1e-10
    # Change of basis data reproduces the orthonormal traces.
    traces = np.array([normal_component(v, b) for v in dirs])
    assert np.allclose(basis.coeffs @ traces, basis.w, atol=1e-12)


# -- gamma targets ----------------------------------------------------------------


def test_gamma_needs_divisible_nt(grid9):
    basis = orthonormalize_normal_traces(
        [PerturbationField.face_dilation("right"), PerturbationField.face_dilation("top")],
        grid9.boundary,
    )
    with pytest.raises(BadTimeDivision):
        build_gamma_targets(basis, T, 50)
    with pytest.raises(BadTimeDivision):
        build_gamma_targets(basis, T, 4)  # windows of one step


def test_gamma_windows_vanish_outside_exactly(grid9):
    basis = orthonormalize_normal_traces([PerturbationField.face_dilation("right")], grid9.boundary)
    targets = build_gamma_targets(basis, T, 16)
    la, lm, lb = targets.windows[0]
    inside = np.zeros(17, dtype=bool)
    inside[la + 1 : lm] = True
    assert np.all(targets.gy[0, 0][~inside] == 0.0)
    assert np.all(np.any(targets.gy[0, 0][inside] != 0.0, axis=1))


@pytest.mark.parametrize("faces", [("right",), ("right", "top"), ("right", "top", "left")])
def test_gamma_identity_tensor(grid9, faces):
    b = grid9.boundary
    basis = orthonormalize_normal_traces(
        [PerturbationField.face_dilation(f) for f in faces], b
    )
    m = basis.m
    targets = build_gamma_targets(basis, T, 12 * m)
    tensor = gamma_identity_tensor(basis, targets, b)
    ideal = np.zeros_like(tensor)
    for k in range(m):
        ideal[k, k, k, 0, 1] = ideal[k, k, k, 1, 0] = 1.0
    assert np.max(np.abs(tensor - ideal)) <= 1e-8


def test_gamma_identity_m1_entry_values(grid9):
    basis = orthonormalize_normal_traces([PerturbationField.face_dilation("right")], grid9.boundary)
    targets = build_gamma_targets(basis, T, 16)
    tensor = gamma_identity_tensor(basis, targets, grid9.boundary)
    assert abs(tensor[0, 0, 0, 0, 1] - 1.0) <= 1e-12
    assert abs(tensor[0, 0, 0, 0, 0]) <= 1e-12
    assert abs(tensor[0, 0, 0, 1, 1]) <= 1e-12


# -- assembly ----------------------------------------------------------------------


def random_traces(grid, nt, rng, scale=1.0):
    nb = grid.boundary.n_points
    return (
        BoundaryTrace(scale * rng.standard_normal((nt + 1, nb)), T),
        BoundaryTrace(scale * rng.standard_normal((nt + 1, nb)), T),
    )


def test_assemble_zero_source_has_zero_linear_parts(grid9, rng):
    b = grid9.boundary
    basis = orthonormalize_normal_traces([PerturbationField.face_dilation("right")], b)
    traces = [random_traces(grid9, 8, rng) for _ in range(2)]
    system = assemble_QLC(basis, traces, None, b, T, 8)
    assert np.all(system.ell == 0.0)
    assert np.all(system.c == 0.0)
    assert np.allclose(system.q[0], system.q[0].T)


def test_assemble_homogeneity(grid9, rng):
    b = grid9.boundary
    basis = orthonormalize_normal_traces([PerturbationField.face_dilation("right")], b)
    traces = [random_traces(grid9, 8, rng) for _ in range(2)]
    xi_tr = random_traces(grid9, 8, rng)
    sys1 = assemble_QLC(basis, traces, xi_tr, b, T, 8)
    doubled = [(BoundaryTrace(2 * a.values, T), BoundaryTrace(2 * c.values, T)) for a, c in traces]
    sys2 = assemble_QLC(basis, doubled, xi_tr, b, T, 8)
    assert np.allclose(sys2.q, 4.0 * sys1.q, rtol=1e-12)
    assert np.allclose(sys2.ell, 2.0 * sys1.ell, rtol=1e-12)
    assert np.allclose(sys2.c, sys1.c, rtol=0, atol=0)


def test_assembly_consistency_against_cascade_resolve(grid9, rng):
    # evaluate_U must reproduce the boundary integral recomputed from a fresh
    # cascade solve of the assembled control (pins the quadratic factor).
    b = grid9.boundary
    nt = 8
    basis = orthonormalize_normal_traces([PerturbationField.face_dilation("right")], b)
    xi = field_from_callable(
        grid9, lambda t, X, Y: 4.0 * np.exp(-((X - 0.5) ** 2 + (Y - 0.5) ** 2) / 0.05), nt, T
    )
    controls = [Control(rng.standard_normal((nt + 1, grid9.n_omega)), T) for _ in range(2)]
    traces = []
    for h in controls:
        y, z = solve_cascade(grid9, None, h)
        traces.append((neumann_trace(y, b, grid9), neumann_trace(z, b, grid9)))
    y_xi, z_xi = solve_cascade(grid9, xi, None)
    xi_tr = (neumann_trace(y_xi, b, grid9), neumann_trace(z_xi, b, grid9))
    system = assemble_QLC(basis, traces, xi_tr, b, T, nt)
    for lam in (np.array([0.7]), np.array([-1.3]), np.array([0.0])):
        model = evaluate_U(system, lam)
        h = combine_controls(controls, lam)
        y, z = solve_cascade(grid9, xi, h)
        ty, tz = neumann_trace(y, b, grid9), neumann_trace(z, b, grid9)
        wt = time_weights(nt) * (T / nt)
        cross = np.einsum("n,nb->b", wt, ty.values * tz.values)
        direct = np.array([np.sum(b.weights * basis.w[0] * cross)])
        assert np.max(np.abs(model - direct)) <= 1e-9 * max(np.max(np.abs(direct)), 1e-12)


# -- U evaluation and the lambda solve ----------------------------------------------


def test_evaluate_U_at_zero_gives_constants(grid9, rng):
    system = ideal_system(2, [-0.3, 1.7], grid9.boundary)
    assert np.allclose(evaluate_U(system, np.zeros(2)), system.c)


def test_evaluate_U_ideal_plugin(grid9):
    system = ideal_system(1, [-1.0], grid9.boundary)
    assert np.isclose(evaluate_U(system, np.array([1.0]))[0], 0.0)
    assert np.isclose(evaluate_U(system, np.array([-2.0]))[0], -4.0 - 1.0)


def test_mu_and_combination(grid9, rng):
    lam = np.array([0.5, -2.0])
    mu = mu_of(lam)
    assert np.array_equal(mu, [0.5, 0.5, -2.0, 2.0])
    controls = [Control(rng.standard_normal((3, grid9.n_omega)), T) for _ in range(4)]
    h = combine_controls(controls, lam)
    manual = 0.5 * controls[0].values + 0.5 * controls[1].values - 2 * controls[2].values + 2 * controls[3].values
    assert np.allclose(h.values, manual)


def test_solve_lambda_zero_system(grid9):
    system = ideal_system(2, [0.0, 0.0], grid9.boundary)
    report = solve_lambda(system)
    assert report.converged
    assert np.all(report.lam == 0.0)
    assert report.iterations == 0


def test_solve_lambda_ideal_m1(grid9):
    report = solve_lambda(ideal_system(1, [-1.0], grid9.boundary))
    assert report.converged and report.method == "bisection"
    assert abs(report.lam[0] - 1.0) <= 1e-5
    assert abs(report.residuals[0]) <= 1e-6


def test_solve_lambda_ideal_m2(grid9):
    report = solve_lambda(ideal_system(2, [-1.0, -4.0], grid9.boundary))
    assert report.converged
    assert np.allclose(report.lam, [1.0, 2.0], atol=1e-5)
    assert np.all(np.abs(report.residuals) <= 1e-6 * np.array([1.0, 4.0]))


def test_solve_lambda_sign_structure(grid9):
    # lambda_k = s(-c_k) in the decoupled system, including the negative branch.
    report = solve_lambda(ideal_system(2, [4.0, -9.0], grid9.boundary))
    assert np.allclose(report.lam, [-2.0, 3.0], atol=1e-5)


def test_solve_lambda_warns_on_large_deviation(grid9):
    system = ideal_system(2, [-1.0, -4.0], grid9.boundary)
    system.q[0, 0, 0] = 0.9  # exceeds the 1/(2M) perturbation budget
    with pytest.warns(NoConvergenceGuarantee):
        solve_lambda(system)


def test_solve_lambda_unsolvable_raises(grid9):
    # U(lambda) = |lambda| + 1 > 0 for all lambda: no root in the span.
    system = ideal_system(1, [1.0], grid9.boundary, ell=[[0.0, 1.0]])
    system.q[:] = 0.0
    with pytest.raises(NoSolutionFound) as err:
        with pytest.warns(NoConvergenceGuarantee):
            solve_lambda(system)
    assert err.value.report is not None
    assert not err.value.report.converged


# -- end-to-end -----------------------------------------------------------------


def small_case1_grid():
    spec = DomainSpec(
        1.0,
        1.0,
        15,
        15,
        omega_region=RegionShape.rect(0.05, 0.28, 0.08, 0.92),
        theta_region=RegionShape.rect(0.35, 0.72, 0.32, 0.7),
        geometric_case=GeometricCase.DISJOINT,
    )
    return build_grid(spec)


def test_exact_insensitize_zero_source_trivial():
    grid = small_case1_grid()
    xi = field_from_callable(grid, lambda t, X, Y: 0.0 * X, 16, T)
    sched = RegularizationSchedule.geometric(1e-2, 1e-6, 10.0, cg_tol=1e-8, cg_maxit=400)
    res = exact_insensitize(
        grid, xi, [PerturbationField.face_dilation("right")], eps=1e-9, schedule=sched
    )
    assert np.all(res.h.values == 0.0)
    assert res.kernel_l1_after == 0.0
    assert np.all(res.u_recomputed == 0.0)


def test_exact_insensitize_rounds_nt_up():
    grid = small_case1_grid()
    xi = field_from_callable(grid, lambda t, X, Y: 0.0 * X, 14, T)
    sched = RegularizationSchedule.geometric(1e-2, 1e-6, 10.0, cg_tol=1e-8, cg_maxit=400)
    res = exact_insensitize(
        grid,
        xi,
        [PerturbationField.face_dilation("right"), PerturbationField.face_dilation("top")],
        eps=1e-9,
        schedule=sched,
    )
    assert res.nt_used == 16  # next multiple of 2M = 4


def test_exact_insensitize_empty_basis_falls_back_to_stage_one():
    grid = small_case1_grid()
    xi = field_from_callable(
        grid, lambda t, X, Y: 3.0 * np.exp(-((X - 0.5) ** 2 + (Y - 0.5) ** 2) / 0.03), 16, T
    )
    sched = RegularizationSchedule.geometric(1e-2, 1e-8, 10.0, cg_tol=1e-8, cg_maxit=800)
    dirs = [PerturbationField.from_samples(np.zeros(grid.boundary.n_points))]
    res = exact_insensitize(grid, xi, dirs, eps=1e-2, schedule=sched)
    assert res.extras.get("empty_basis")
    assert res.basis is None
    assert res.kernel_l1_after < res.kernel_l1_before


def test_exact_insensitize_end_to_end_m1():
    grid = small_case1_grid()
    nt = 24
    xi = field_from_callable(
        grid, lambda t, X, Y: 5.0 * np.exp(-((X - 0.55) ** 2 + (Y - 0.5) ** 2) / (2 * 0.12**2)), nt, T
    )
    sched = RegularizationSchedule.geometric(1e-2, 1e-8, 10.0, cg_tol=1e-8, cg_maxit=1200)
    bsched = RegularizationSchedule.geometric(1e-2, 1e-7, 10.0, cg_tol=1e-6, cg_maxit=500)
    base_kernel = kernel_for(grid, xi, None)
    from insenskit.shape import kernel_l1_norm

    k0 = kernel_l1_norm(base_kernel, grid.boundary)
    eps = 0.5 * k0
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoConvergenceGuarantee)
        res = exact_insensitize(grid, xi, [PerturbationField.face_dilation("right")], eps, sched, basis_schedule=bsched)
    tol_vec = 1e-6 * np.maximum(1.0, np.abs(res.system.c))
    assert np.all(np.abs(res.u_recomputed) <= tol_vec)
    assert res.kernel_l1_after <= eps
    assert res.lambda_report.residuals_recomputed
    # The derivative vanishes along every direction of the family: pair the
    # recomputed kernel with random elements of the span.
    y, z = solve_cascade(grid, xi, res.h)
    b = grid.boundary
    kernel = kernel_for(grid, xi, res.h)
    rng = np.random.default_rng(5)
    for _ in range(10):
        coef = rng.standard_normal(res.basis.m)
        vn = coef @ res.basis.w
        dd = directional_derivative(kernel, PerturbationField.from_samples(vn), b)
        bound = np.linalg.norm(coef) * np.linalg.norm(np.abs(res.u_recomputed)) + 1e-12
        assert abs(dd) <= bound * (1.0 + 1e-9)
