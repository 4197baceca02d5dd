"""Insensitizing-control toolkit for the heat equation under boundary variations.

The package computes the boundary kernel whose pairing with a perturbation's
normal trace gives the first-order variation of the tracked functional,
synthesizes approximate insensitizing controls (optionally with terminal
approximate or null control), solves the exact insensitizing problem over a
finite family of directions through the windowed-target construction, and
realizes the explicit cutoff constructions that zero the kernel outright.
"""

from .control_approx import (
    ControlResult,
    RegularizationSchedule,
    TerminalMode,
    TraceTarget,
    approx_insensitize,
    approx_trace_control,
    insensitize_with_terminal,
    null_control,
)
from .domain import (
    DomainSpec,
    GeometricCase,
    Grid,
    PerturbationField,
    RegionShape,
    build_grid,
    normal_component,
)
from .insens_constructive import (
    ConstructiveResult,
    CutoffFunction,
    build_cutoff,
    commutator_apply,
    construct_boundary_theta,
    construct_theta_in_omega,
)
from .insens_exact_fd import (
    DirectionBasis,
    ExactInsensResult,
    GammaTargets,
    LambdaSolveReport,
    QLCSystem,
    assemble_QLC,
    build_gamma_targets,
    compute_basis_controls,
    evaluate_U,
    exact_insensitize,
    orthonormalize_normal_traces,
    solve_lambda,
)
from .pde import (
    BoundaryTrace,
    Control,
    SpaceTimeField,
    TerminalState,
    apply_L,
    apply_L_augmented,
    apply_L_augmented_transpose,
    apply_L_transpose,
    field_from_callable,
    neumann_trace,
    solve_backward,
    solve_cascade,
    solve_forward,
)
from .shape import (
    SensitivityKernel,
    directional_derivative,
    evaluate_J,
    finite_difference_dJ,
    finite_difference_dJ_richardson,
    kernel_l1_norm,
    sensitivity_kernel,
)

__version__ = "0.1.0"
