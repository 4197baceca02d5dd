"""Scenario configuration, experiment orchestration and report emission.

Config files are INI-style sections with JSON values for structured entries::

    [domain]
    lx = 1.0
    nx = 33
    omega = {"shape": "rect", "x0": 0.05, "x1": 0.24, "y0": 0.08, "y1": 0.92}
    theta = {"shape": "rect", "x0": 0.31, "x1": 0.69, "y0": 0.31, "y1": 0.69}
    case = disjoint

Unknown sections or keys fail parsing (strict mode). Every numeric in the
report is recomputed by re-solve; identical config and seed give bitwise
identical report numerics (wall-clock timings live in a separate block).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import io as iomod
from .control_approx import (
    RegularizationSchedule,
    TerminalMode,
    approx_insensitize,
    insensitize_with_terminal,
)
from .domain import DomainSpec, GeometricCase, Grid, PerturbationField, RegionShape, build_grid
from .errors import (
    InsensError,
    NoSolutionFound,
    ParseError,
    ValidationError,
    VerificationFailed,
)
from .insens_constructive import (
    construct_boundary_theta,
    construct_theta_in_omega,
    quintic_ramp,
)
from .insens_exact_fd import INTERPRETATION_NOTES, exact_insensitize
from .pde import SpaceTimeField, TerminalState, field_from_callable, solve_cascade, neumann_trace
from .shape import (
    directional_derivative,
    finite_difference_dJ_components,
    kernel_for,
    kernel_l1_norm,
)

_KNOWN_KEYS = {
    "domain": {"lx", "ly", "nx", "ny", "omega", "theta", "case"},
    "time": {"t", "nt"},
    "source": {"kind", "amplitude", "cx", "cy", "sigma", "i", "j", "window", "window_ramp"},
    "control": {
        "epsilon",
        "alpha_start",
        "alpha_end",
        "alpha_factor",
        "cg_tol",
        "cg_maxit",
        "terminal_mode",
        "w_trace",
        "w_terminal",
        "null_reduction",
        "y_t",
        "eps_terminal",
    },
    "directions": None,  # any keys, each one perturbation field
    "shape": {"face", "taus", "rel_tol"},
    "constructive": {"variant", "commutator", "tol_c"},
    "output": {"dir", "svg", "save_control"},
}

_DEFAULT_DOMAIN = {
    "lx": 1.0,
    "ly": 1.0,
    "nx": 33,
    "ny": 33,
    "omega": {"shape": "rect", "x0": 0.05, "x1": 0.24, "y0": 0.08, "y1": 0.92},
    "theta": {"shape": "rect", "x0": 0.31, "x1": 0.69, "y0": 0.31, "y1": 0.69},
    "case": "disjoint",
}


@dataclass(eq=False)
class SourceSpec:
    """Analytic source family sampled onto the grid when a run starts."""

    kind: str = "gaussian_bump"
    amplitude: float = 5.0
    cx: float = 0.55
    cy: float = 0.5
    sigma: float = 0.12
    i: int = 1
    j: int = 1
    window: Optional[tuple] = None
    window_ramp: float = 0.1

    def as_callable(self, spec: DomainSpec) -> Callable:
        if self.kind == "zero":
            base = lambda X, Y: 0.0 * X
        elif self.kind == "gaussian_bump":
            cx, cy, s, amp = self.cx, self.cy, self.sigma, self.amplitude
            base = lambda X, Y: amp * np.exp(-(((X - cx) ** 2) + (Y - cy) ** 2) / (2 * s * s))
        elif self.kind == "eigenmode":
            kx = self.i * np.pi / spec.lx
            ky = self.j * np.pi / spec.ly
            amp = self.amplitude
            base = lambda X, Y: amp * np.sin(kx * X) * np.sin(ky * Y)
        else:
            raise ValidationError(f"unknown source kind {self.kind!r}")
        if self.window is None:
            return lambda t, X, Y: base(X, Y)
        t0, t1 = self.window
        ramp = self.window_ramp

        def windowed(t, X, Y):
            up = quintic_ramp(np.array([(t - t0) / ramp]))[0][0]
            down = quintic_ramp(np.array([(t1 - t) / ramp]))[0][0]
            return up * down * base(X, Y)

        return windowed

    def sample(self, grid: Grid, nt: int, t_horizon: float) -> SpaceTimeField:
        return field_from_callable(grid, self.as_callable(grid.spec), nt, t_horizon)


@dataclass(eq=False)
class ScenarioConfig:
    domain: DomainSpec
    nt: int
    t_horizon: float
    source: SourceSpec
    control: dict
    directions: list
    shape: dict
    constructive: dict
    output: dict
    echo: dict

    def schedule(self) -> RegularizationSchedule:
        c = self.control
        return RegularizationSchedule.geometric(
            start=c["alpha_start"],
            end=c["alpha_end"],
            factor=c["alpha_factor"],
            cg_tol=c["cg_tol"],
            cg_maxit=int(c["cg_maxit"]),
        )


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _region_from(obj, where: str) -> RegionShape:
    if not isinstance(obj, dict) or "shape" not in obj:
        raise ValidationError(f"{where} must be an object with a 'shape' key")
    shape = obj["shape"]
    try:
        if shape == "rect":
            return RegionShape.rect(obj["x0"], obj["x1"], obj["y0"], obj["y1"])
        if shape == "disk":
            return RegionShape.disk(obj["cx"], obj["cy"], obj["r"])
        if shape == "annulus":
            return RegionShape.annulus(obj["cx"], obj["cy"], obj["r_in"], obj["r_out"])
    except KeyError as exc:
        raise ValidationError(f"{where}: missing key {exc} for shape {shape!r}") from exc
    raise ValidationError(f"{where}: unknown shape {shape!r}")


def _direction_from(obj, where: str) -> PerturbationField:
    if isinstance(obj, dict) and obj.get("kind") == "face":
        return PerturbationField.face_dilation(obj["face"])
    if isinstance(obj, dict) and obj.get("kind") == "samples":
        return PerturbationField.from_samples(obj["values"])
    if isinstance(obj, dict) and obj.get("kind") == "file":
        values = np.loadtxt(obj["path"], delimiter=",")
        return PerturbationField.from_samples(np.atleast_1d(values))
    raise ValidationError(f"{where}: direction must be a face, samples or file object")


def parse_config(path) -> ScenarioConfig:
    """Parse and validate a scenario file; defaults are filled and echoed."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ParseError(f"{exc}") from exc

    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            raise ParseError(f"unknown section [{section}]")
        allowed = _KNOWN_KEYS[section]
        if allowed is not None:
            for key in cp[section]:
                if key not in allowed:
                    raise ParseError(f"unknown key {key!r} in [{section}]")

    if "domain" not in cp:
        raise ValidationError("missing [domain] section")

    dom = dict(_DEFAULT_DOMAIN)
    for key, raw in cp["domain"].items():
        dom[key] = _parse_value(raw)
    case = str(dom["case"]).lower()
    if case not in ("disjoint", "intersecting"):
        raise ValidationError(f"[domain] case must be 'disjoint' or 'intersecting', got {case!r}")
    domain = DomainSpec(
        lx=float(dom["lx"]),
        ly=float(dom["ly"]),
        nx=int(dom["nx"]),
        ny=int(dom["ny"]),
        omega_region=_region_from(dom["omega"], "[domain] omega"),
        theta_region=_region_from(dom["theta"], "[domain] theta"),
        geometric_case=GeometricCase(case),
    )

    tsec = {k: _parse_value(v) for k, v in cp["time"].items()} if "time" in cp else {}
    nt = int(tsec.get("nt", 64))
    t_horizon = float(tsec.get("t", 1.0))
    if nt < 1 or t_horizon <= 0:
        raise ValidationError("[time] needs nt >= 1 and t > 0")

    ssec = {k: _parse_value(v) for k, v in cp["source"].items()} if "source" in cp else {}
    if "window" in ssec and ssec["window"] is not None:
        ssec["window"] = tuple(ssec["window"])
    source = SourceSpec(**ssec)

    control = {
        "epsilon": 1e-4,
        "alpha_start": 1e-2,
        "alpha_end": 1e-10,
        "alpha_factor": 10.0,
        "cg_tol": 1e-10,
        "cg_maxit": 2000,
        "terminal_mode": "none",
        "w_trace": 1.0,
        "w_terminal": 10.0,
        "null_reduction": 1e-3,
        "y_t": None,
        "eps_terminal": None,
    }
    if "control" in cp:
        for key, raw in cp["control"].items():
            control[key] = _parse_value(raw)
    if control["terminal_mode"] not in ("none", "approximate", "null"):
        raise ValidationError(f"[control] terminal_mode {control['terminal_mode']!r} unknown")

    directions = []
    if "directions" in cp:
        for key, raw in cp["directions"].items():
            directions.append(_direction_from(_parse_value(raw), f"[directions] {key}"))

    shape_opts = {"face": "right", "taus": [1e-2, 5e-3], "rel_tol": 0.05}
    if "shape" in cp:
        for key, raw in cp["shape"].items():
            shape_opts[key] = _parse_value(raw)

    constructive = {"variant": "theta-in-omega", "commutator": "discrete", "tol_c": 1e-3}
    if "constructive" in cp:
        for key, raw in cp["constructive"].items():
            constructive[key] = _parse_value(raw)
    if constructive["variant"] not in ("theta-in-omega", "boundary-theta"):
        raise ValidationError(f"[constructive] variant {constructive['variant']!r} unknown")

    output = {"dir": "out", "svg": False, "save_control": True}
    if "output" in cp:
        for key, raw in cp["output"].items():
            output[key] = _parse_value(raw)

    echo = {s: dict(cp[s]) for s in cp.sections()}
    return ScenarioConfig(
        domain=domain,
        nt=nt,
        t_horizon=t_horizon,
        source=source,
        control=control,
        directions=directions,
        shape=shape_opts,
        constructive=constructive,
        output=output,
        echo=echo,
    )


# -- report ---------------------------------------------------------------------


@dataclass(eq=False)
class RunReport:
    run_id: str
    subcommand: str
    seed: int
    config_echo: dict
    results: dict = field(default_factory=dict)
    criteria_met: bool = False
    interpretation_flags: tuple = ()
    environment: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "subcommand": self.subcommand,
            "seed": self.seed,
            "config": self.config_echo,
            "results": self.results,
            "criteria_met": self.criteria_met,
            "interpretation_flags": list(self.interpretation_flags),
            "environment": self.environment,
            "timing": self.timing,
        }


def _run_id(config: ScenarioConfig, subcommand: str, seed: int) -> str:
    payload = json.dumps([config.echo, subcommand, seed], sort_keys=True).encode()
    return hashlib.sha1(payload).hexdigest()[:12]


def _environment() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


def _boundary_arc(grid: Grid) -> np.ndarray:
    b = grid.boundary
    offsets = {0: 0.0, 1: grid.ly, 2: 2 * grid.ly, 3: 2 * grid.ly + grid.lx}
    rel = np.where(b.faces < 2, b.points[:, 1] - grid.y0, b.points[:, 0] - grid.x0)
    return np.array([offsets[f] for f in b.faces]) + rel


def _write_svg(path, xs, ys, title):
    """Minimal single-polyline SVG chart, no plotting dependency."""
    width, height, pad = 640, 400, 45
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size == 0:
        return
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    px = pad + (xs - x0) / (x1 - x0) * (width - 2 * pad)
    py = height - pad - (ys - y0) / (y1 - y0) * (height - 2 * pad)
    points = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="100%" height="100%" fill="white"/>'
        f'<text x="{width/2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>'
        f'<rect x="{pad}" y="{pad}" width="{width-2*pad}" height="{height-2*pad}" '
        f'fill="none" stroke="#999"/>'
        f'<polyline points="{points}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>'
        f'<text x="{pad}" y="{height-10}" font-size="11">{x0:.3g}</text>'
        f'<text x="{width-pad}" y="{height-10}" text-anchor="end" font-size="11">{x1:.3g}</text>'
        f'<text x="5" y="{height-pad}" font-size="11">{y0:.3g}</text>'
        f'<text x="5" y="{pad+4}" font-size="11">{y1:.3g}</text>'
        f"</svg>"
    )
    Path(path).write_text(svg)


def _write_outputs(report: RunReport, config: ScenarioConfig, out_dir: Path, plots: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    rows = []
    for name, value in sorted(report.results.items()):
        if isinstance(value, (int, float, bool, str)):
            rows.append(f"{name},{value}")
    (out_dir / "summary.csv").write_text("metric,value\n" + "\n".join(rows) + "\n")
    if "kernel" in plots:
        arc, kernel = plots["kernel"]
        np.savetxt(out_dir / "kernel.dat", np.column_stack([arc, kernel]), header="arc kernel")
        if config.output.get("svg"):
            _write_svg(out_dir / "kernel.svg", arc, kernel, "boundary kernel")
    if "schedule" in plots:
        alphas, residuals = plots["schedule"]
        if len(alphas):
            np.savetxt(
                out_dir / "schedule.dat", np.column_stack([alphas, residuals]), header="alpha residual"
            )
            if config.output.get("svg"):
                _write_svg(
                    out_dir / "schedule.svg",
                    np.log10(np.asarray(alphas)),
                    np.log10(np.maximum(np.asarray(residuals), 1e-300)),
                    "log10 alpha vs log10 residual",
                )


def _schedule_plot_from_history(history):
    alphas = [row["alpha"] for row in history]
    residuals = [
        row["residual_total"] if np.isfinite(row.get("residual_total", np.nan)) else row["kernel_l1"]
        for row in history
    ]
    return alphas, residuals


def _run_shape_derivative(config: ScenarioConfig, report: RunReport, out_dir: Path) -> dict:
    grid = build_grid(config.domain)
    xi_callable = config.source.as_callable(config.domain)
    xi = config.source.sample(grid, config.nt, config.t_horizon)
    v = PerturbationField.face_dilation(config.shape["face"])
    kernel = kernel_for(grid, xi, None)
    formula = directional_derivative(kernel, v, grid.boundary)
    taus = list(config.shape["taus"])
    rows = []
    fd_values = {}
    for tau in taus:
        j_plus, j_minus, fd_tau = finite_difference_dJ_components(
            config.domain, xi_callable, None, v, tau, nt=config.nt, t_horizon=config.t_horizon
        )
        fd_values[tau] = fd_tau
        rel = abs(formula - fd_tau) / max(abs(fd_tau), 1e-300)
        rows.append((tau, j_plus, j_minus, fd_tau, formula, rel))
    if len(taus) == 2 and np.isclose(taus[1] * 2.0, taus[0]):
        fd = (4.0 * fd_values[taus[1]] - fd_values[taus[0]]) / 3.0
    else:
        fd = fd_values[taus[-1]]
    rel_err = abs(formula - fd) / max(abs(fd), 1e-300)
    lines = ["tau,J_plus,J_minus,fd_value,formula_value,rel_err"]
    lines += [",".join(str(x) for x in row) for row in rows]
    lines.append(f"richardson,,,{fd},{formula},{rel_err}")
    (out_dir / "shape_derivative.csv").write_text("\n".join(lines) + "\n")
    report.results.update(
        {
            "formula_value": formula,
            "fd_value": fd,
            "rel_err": rel_err,
            "kernel_l1": kernel_l1_norm(kernel, grid.boundary),
        }
    )
    report.criteria_met = rel_err <= config.shape["rel_tol"]
    return {"kernel": (_boundary_arc(grid), kernel.values)}


def _terminal_target(config: ScenarioConfig, grid: Grid) -> Optional[TerminalState]:
    obj = config.control.get("y_t")
    if obj is None:
        return None
    spec = SourceSpec(**obj)
    vals = spec.as_callable(config.domain)(0.0, *grid.meshgrid())
    if spec.kind == "eigenmode":
        # Normalize the mode to unit discrete L2 norm before scaling.
        base = vals / spec.amplitude
        nrm = np.sqrt(grid.cell_area * np.sum(base**2))
        vals = spec.amplitude * base / nrm
    return TerminalState(np.broadcast_to(vals, (grid.nx, grid.ny)).copy())


def _run_approx(config: ScenarioConfig, report: RunReport, out_dir: Path) -> dict:
    grid = build_grid(config.domain)
    xi = config.source.sample(grid, config.nt, config.t_horizon)
    schedule = config.schedule()
    mode = config.control["terminal_mode"]
    if mode == "none":
        res = approx_insensitize(grid, xi, config.control["epsilon"], schedule)
    else:
        res = insensitize_with_terminal(
            grid,
            xi,
            eps_kernel=config.control["epsilon"],
            schedule=schedule,
            terminal_mode=TerminalMode(mode),
            y_t=_terminal_target(config, grid),
            eps_terminal=config.control["eps_terminal"],
            null_reduction=config.control["null_reduction"],
            w_trace=config.control["w_trace"],
            w_terminal=config.control["w_terminal"],
        )
    report.results.update(
        {
            "status": res.status,
            "kernel_l1_before": res.kernel_l1_before,
            "kernel_l1_after": res.kernel_l1_after,
            "alpha_used": res.alpha_used,
            "cg_iterations": res.cg_iterations,
            "residuals": res.residuals,
            "extras": {
                k: v
                for k, v in res.extras.items()
                if isinstance(v, (int, float, bool, str))
            },
        }
    )
    report.criteria_met = res.converged
    if config.output.get("save_control", True):
        iomod.save_binary(res.h, out_dir / "control.bin")
    kernel = kernel_for(grid, xi, res.h)
    return {
        "kernel": (_boundary_arc(grid), kernel.values),
        "schedule": _schedule_plot_from_history(res.history),
    }


def _run_exact_fd(
    config: ScenarioConfig, report: RunReport, out_dir: Path, seed: int, parallel: bool
) -> dict:
    if not config.directions:
        raise ValidationError("run exact-fd needs a non-empty [directions] section")
    grid = build_grid(config.domain)
    xi = config.source.sample(grid, config.nt, config.t_horizon)
    schedule = config.schedule()
    try:
        res = exact_insensitize(
            grid,
            xi,
            config.directions,
            eps=config.control["epsilon"],
            schedule=schedule,
            seed=seed,
            parallel=parallel,
        )
        failed = None
    except VerificationFailed as exc:
        res = exc.result
        failed = str(exc)
    lam_report = res.lambda_report
    report.results.update(
        {
            "kernel_l1_before": res.kernel_l1_before,
            "kernel_l1_after": res.kernel_l1_after,
            "eps": res.eps,
            "eps0": res.eps0,
            "nt_used": res.nt_used,
            "passes": res.passes,
            "amplification": res.amplification,
            "verification_failure": failed,
        }
    )
    if lam_report is not None:
        report.results["lambda"] = lam_report.lam.tolist()
        report.results["ball_radius"] = lam_report.ball_radius
        report.results["method"] = lam_report.method
        report.results["residual_table"] = [
            {"k": k + 1, "U_k": float(res.u_recomputed[k]), "c_k": float(res.system.c[k])}
            for k in range(res.system.m)
        ]
        report.results["max_q_deviation"] = res.extras.get("max_q_deviation")
    report.criteria_met = failed is None
    if config.output.get("save_control", True):
        iomod.save_binary(res.h, out_dir / "control.bin")
    from .pde import resample_time

    kernel = kernel_for(grid, resample_time(xi, res.nt_used), res.h)
    return {
        "kernel": (_boundary_arc(grid), kernel.values),
        "schedule": _schedule_plot_from_history(res.stage1.history),
    }


def _run_constructive(config: ScenarioConfig, report: RunReport, out_dir: Path) -> dict:
    grid = build_grid(config.domain)
    xi = config.source.sample(grid, config.nt, config.t_horizon)
    variant = config.constructive["variant"]
    try:
        if variant == "theta-in-omega":
            res = construct_theta_in_omega(grid, xi, commutator=config.constructive["commutator"])
        else:
            res = construct_boundary_theta(
                grid,
                xi,
                commutator=config.constructive["commutator"],
                tol_c=config.constructive["tol_c"],
            )
        failed = None
    except VerificationFailed as exc:
        res = exc.result
        failed = str(exc)
    report.results.update(
        {
            "variant": variant,
            "support_ok": res.support_ok,
            "kernel_l1": res.kernel_l1,
            "kernel_scale": res.kernel_scale,
            "defects": res.defects,
            "verification_failure": failed,
        }
    )
    report.criteria_met = failed is None
    if config.output.get("save_control", True):
        iomod.save_binary(res.h, out_dir / "control.bin")
    b = grid.boundary
    from .shape import sensitivity_kernel

    kernel = sensitivity_kernel(neumann_trace(res.y, b, grid), neumann_trace(res.z, b, grid))
    return {"kernel": (_boundary_arc(grid), kernel.values)}


def run_scenario(
    config: ScenarioConfig, subcommand: str, seed: int = 0, out_dir=None, parallel: bool = False
) -> tuple[RunReport, int]:
    """Execute one scenario; writes report.json, summary.csv and plot data.

    Returns the report and the exit code (0 criteria met, 2 best effort).
    ``parallel`` runs the independent basis-control syntheses of exact-fd
    concurrently (each worker on its own factorization).
    """
    out_dir = Path(out_dir) if out_dir is not None else Path(config.output["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport(
        run_id=_run_id(config, subcommand, seed),
        subcommand=subcommand,
        seed=seed,
        config_echo=config.echo,
        interpretation_flags=INTERPRETATION_NOTES if subcommand == "exact-fd" else (),
        environment=_environment(),
    )
    t0 = time.perf_counter()
    if subcommand == "shape-derivative":
        plots = _run_shape_derivative(config, report, out_dir)
    elif subcommand == "approx":
        plots = _run_approx(config, report, out_dir)
    elif subcommand == "exact-fd":
        plots = _run_exact_fd(config, report, out_dir, seed, parallel)
    elif subcommand == "constructive":
        plots = _run_constructive(config, report, out_dir)
    else:
        raise ValidationError(f"unknown subcommand {subcommand!r}")
    report.timing["wall_seconds"] = time.perf_counter() - t0
    report.timing["parallel"] = parallel
    _write_outputs(report, config, out_dir, plots)
    return report, (0 if report.criteria_met else 2)


def verify_saved_control(config: ScenarioConfig, control_path) -> dict:
    """Recompute kernel and trace norms for a persisted control file."""
    grid = build_grid(config.domain)
    h = iomod.load_binary(control_path, grid)
    xi = config.source.sample(grid, h.nt, h.t_horizon)
    kernel = kernel_for(grid, xi, h)
    b = grid.boundary
    y, z = solve_cascade(grid, xi, h)
    from .pde import trace_norm

    return {
        "kernel_l1": kernel_l1_norm(kernel, b),
        "trace_y_norm": trace_norm(neumann_trace(y, b, grid), b),
        "trace_z_norm": trace_norm(neumann_trace(z, b, grid), b),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="insenskit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_verify = sub.add_parser("verify", help="consistency checks")
    p_verify.add_argument("what", choices=["shape-derivative"])
    p_run = sub.add_parser("run", help="control synthesis runs")
    p_run.add_argument("what", choices=["approx", "exact-fd", "constructive"])
    for p in (p_verify, p_run):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--parallel", action="store_true")
        p.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    try:
        config = parse_config(args.config)
        _, code = run_scenario(
            config, args.what, seed=args.seed, out_dir=args.out, parallel=args.parallel
        )
        return code
    except InsensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
