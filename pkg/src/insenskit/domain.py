"""Reference domain, subdomains, discrete boundary geometry and perturbation fields.

The reference domain is an axis-aligned rectangle (0, Lx) x (0, Ly) discretized
by an interior tensor grid with homogeneous Dirichlet boundary. Boundary sample
points sit on the interior grid lines, one per line and face, with arc-length
quadrature weights that sum exactly to the perimeter. Corners carry no sample:
the normal is ill-defined there and the corner contribution to boundary
integrals has measure zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidSpec

FACES = ("left", "right", "bottom", "top")


class GeometricCase(Enum):
    DISJOINT = "disjoint"
    INTERSECTING = "intersecting"


@dataclass(frozen=True)
class RegionShape:
    """Axis-aligned rectangle, disk or annulus defining an open subset.

    Membership is strict (open set), which makes rasterization monotone under
    shape enlargement.
    """

    kind: str  # "rect" | "disk" | "annulus"
    params: tuple

    @classmethod
    def rect(cls, x0: float, x1: float, y0: float, y1: float) -> "RegionShape":
        if not (x0 < x1 and y0 < y1):
            raise InvalidSpec(f"rect needs x0<x1 and y0<y1, got {(x0, x1, y0, y1)}")
        return cls("rect", (float(x0), float(x1), float(y0), float(y1)))

    @classmethod
    def disk(cls, cx: float, cy: float, r: float) -> "RegionShape":
        if r <= 0:
            raise InvalidSpec(f"disk needs r>0, got r={r}")
        return cls("disk", (float(cx), float(cy), float(r)))

    @classmethod
    def annulus(cls, cx: float, cy: float, r_in: float, r_out: float) -> "RegionShape":
        if not (0 < r_in < r_out):
            raise InvalidSpec(f"annulus needs 0<r_in<r_out, got {(r_in, r_out)}")
        return cls("annulus", (float(cx), float(cy), float(r_in), float(r_out)))

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Strict membership of points in the open region (vectorized)."""
        if self.kind == "rect":
            x0, x1, y0, y1 = self.params
            return (x > x0) & (x < x1) & (y > y0) & (y < y1)
        if self.kind == "disk":
            cx, cy, r = self.params
            return (x - cx) ** 2 + (y - cy) ** 2 < r * r
        if self.kind == "annulus":
            cx, cy, r_in, r_out = self.params
            d2 = (x - cx) ** 2 + (y - cy) ** 2
            return (d2 > r_in * r_in) & (d2 < r_out * r_out)
        raise InvalidSpec(f"unknown region kind {self.kind!r}")

    def bounds(self) -> tuple[float, float, float, float]:
        """Bounding box (x0, x1, y0, y1) of the closure."""
        if self.kind == "rect":
            return self.params
        if self.kind == "disk":
            cx, cy, r = self.params
            return (cx - r, cx + r, cy - r, cy + r)
        cx, cy, _, r_out = self.params
        return (cx - r_out, cx + r_out, cy - r_out, cy + r_out)

    def closure_disjoint_from(self, other: "RegionShape") -> bool:
        """Conservative parameter-level test that the two closures do not meet."""
        a, b = self, other
        if a.kind == "annulus" or b.kind == "annulus":
            if b.kind == "annulus" and a.kind != "annulus":
                a, b = b, a
            if a.kind == "annulus" and b.kind == "disk":
                cx, cy, r_in, r_out = a.params
                dx, dy, r = b.params
                d = float(np.hypot(dx - cx, dy - cy))
                return d + r < r_in or d - r > r_out
            # Remaining annulus pairings: fall back to bounding boxes.
            ax0, ax1, ay0, ay1 = a.bounds()
            bx0, bx1, by0, by1 = b.bounds()
            return ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0
        if a.kind == "rect" and b.kind == "rect":
            ax0, ax1, ay0, ay1 = a.params
            bx0, bx1, by0, by1 = b.params
            return ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0
        if a.kind == "disk" and b.kind == "disk":
            ax, ay, ar = a.params
            bx, by, br = b.params
            return float(np.hypot(ax - bx, ay - by)) > ar + br
        # rect vs disk: distance from disk center to the rectangle.
        if a.kind == "disk":
            a, b = b, a
        x0, x1, y0, y1 = a.params
        cx, cy, r = b.params
        ddx = max(x0 - cx, 0.0, cx - x1)
        ddy = max(y0 - cy, 0.0, cy - y1)
        return float(np.hypot(ddx, ddy)) > r


@dataclass(frozen=True)
class DomainSpec:
    """Reference rectangle with control region omega and observation region theta."""

    lx: float
    ly: float
    nx: int
    ny: int
    omega_region: RegionShape
    theta_region: RegionShape
    geometric_case: GeometricCase = GeometricCase.DISJOINT

    def __post_init__(self):
        if self.lx <= 0 or self.ly <= 0:
            raise InvalidSpec("domain lengths must be positive")
        if self.nx < 4 or self.ny < 4:
            raise InvalidSpec(f"need nx, ny >= 4, got {(self.nx, self.ny)}")


@dataclass(frozen=True)
class BoundaryGeometry:
    """Discrete boundary of the rectangle.

    One sample per interior grid line and face, ordered left, right, bottom,
    top (ascending coordinate within each face). ``weights`` is the arc-length
    measure; end samples of each face absorb the half-cells adjacent to the
    excluded corners so the weights sum exactly to the perimeter.

    The one-sided trace stencil data (first and second interior node along the
    inward normal, and the spacing along that axis) is precomputed here so the
    Neumann trace and its transpose act vectorized.
    """

    points: np.ndarray      # (nb, 2)
    normals: np.ndarray     # (nb, 2) outward unit, axis-aligned
    weights: np.ndarray     # (nb,)
    faces: np.ndarray       # (nb,) index into FACES
    face_coord: np.ndarray  # (nb,) coordinate along the face
    idx1: np.ndarray        # (nb, 2) (i, j) of first interior node inward
    idx2: np.ndarray        # (nb, 2) second interior node inward
    h_axis: np.ndarray      # (nb,) grid spacing along the normal axis
    perimeter: float

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def face_mask(self, face: str) -> np.ndarray:
        return self.faces == FACES.index(face)


def _face_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 1.5 * h
    return w


def _build_boundary(lx, ly, nx, ny, hx, hy, x0, y0) -> BoundaryGeometry:
    xs = x0 + hx * np.arange(1, nx + 1)
    ys = y0 + hy * np.arange(1, ny + 1)
    pts, nrm, wts, fcs, crd, i1, i2, ha = [], [], [], [], [], [], [], []

    def add(face, p, n, w, c, a, b):
        pts.append(p)
        nrm.append(n)
        wts.append(w)
        fcs.append(FACES.index(face))
        crd.append(c)
        i1.append(a)
        i2.append(b)
        ha.append(hx if face in ("left", "right") else hy)

    wy = _face_weights(ny, hy)
    for j, y in enumerate(ys):
        add("left", (x0, y), (-1.0, 0.0), wy[j], y, (0, j), (1, j))
    for j, y in enumerate(ys):
        add("right", (x0 + lx, y), (1.0, 0.0), wy[j], y, (nx - 1, j), (nx - 2, j))
    wx = _face_weights(nx, hx)
    for i, x in enumerate(xs):
        add("bottom", (x, y0), (0.0, -1.0), wx[i], x, (i, 0), (i, 1))
    for i, x in enumerate(xs):
        add("top", (x, y0 + ly), (0.0, 1.0), wx[i], x, (i, ny - 1), (i, ny - 2))

    return BoundaryGeometry(
        points=np.array(pts),
        normals=np.array(nrm),
        weights=np.array(wts),
        faces=np.array(fcs, dtype=int),
        face_coord=np.array(crd),
        idx1=np.array(i1, dtype=int),
        idx2=np.array(i2, dtype=int),
        h_axis=np.array(ha),
        perimeter=2.0 * (lx + ly),
    )


@dataclass(frozen=True)
class Grid:
    """Immutable discretized domain; safe to share across threads."""

    spec: DomainSpec
    lx: float
    ly: float
    nx: int
    ny: int
    hx: float
    hy: float
    x0: float
    y0: float
    xs: np.ndarray            # (nx,) interior x coordinates
    ys: np.ndarray            # (ny,)
    mask_omega: np.ndarray    # (nx, ny) bool
    mask_theta: np.ndarray    # (nx, ny) bool
    boundary: BoundaryGeometry
    omega_flat: np.ndarray    # flat indices (lexicographic, i-major) of omega nodes
    _caches: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def n_omega(self) -> int:
        return self.omega_flat.size

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs, self.ys, indexing="ij")

    def theta_area(self) -> float:
        """Node-count quadrature of the theta indicator."""
        return float(self.mask_theta.sum()) * self.cell_area


def build_grid(spec: DomainSpec, origin: tuple[float, float] = (0.0, 0.0)) -> Grid:
    """Rasterize a DomainSpec onto the interior tensor grid.

    ``origin`` shifts the rectangle (used by the re-solve oracle for dilated
    rectangles); the regions stay in absolute coordinates.
    """
    x0, y0 = float(origin[0]), float(origin[1])
    hx = spec.lx / (spec.nx + 1)
    hy = spec.ly / (spec.ny + 1)
    xs = x0 + hx * np.arange(1, spec.nx + 1)
    ys = y0 + hy * np.arange(1, spec.ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    mask_omega = spec.omega_region.contains(X, Y)
    mask_theta = spec.theta_region.contains(X, Y)

    if not mask_omega.any():
        raise InvalidSpec("omega rasterizes to an empty node set")
    if not mask_theta.any():
        raise InvalidSpec("theta rasterizes to an empty node set")

    if spec.geometric_case is GeometricCase.DISJOINT:
        if (mask_omega & mask_theta).any():
            raise InvalidSpec("disjoint case but omega and theta masks overlap")
        if not spec.omega_region.closure_disjoint_from(spec.theta_region):
            raise InvalidSpec("disjoint case but region closures meet")
        tb = spec.theta_region.bounds()
        rect = (x0, x0 + spec.lx, y0, y0 + spec.ly)
        if not (rect[0] < tb[0] and tb[1] < rect[1] and rect[2] < tb[2] and tb[3] < rect[3]):
            raise InvalidSpec("disjoint case needs closure(theta) strictly inside the rectangle")
        if spec.theta_region.kind == "annulus":
            raise InvalidSpec("annular theta disconnects the complement of its closure")
    else:
        if not (mask_omega & mask_theta).any():
            raise InvalidSpec("intersecting case but omega and theta share no node")

    boundary = _build_boundary(spec.lx, spec.ly, spec.nx, spec.ny, hx, hy, x0, y0)
    assert abs(boundary.weights.sum() - boundary.perimeter) <= 1e-12 * boundary.perimeter

    return Grid(
        spec=spec,
        lx=spec.lx,
        ly=spec.ly,
        nx=spec.nx,
        ny=spec.ny,
        hx=hx,
        hy=hy,
        x0=x0,
        y0=y0,
        xs=xs,
        ys=ys,
        mask_omega=mask_omega,
        mask_theta=mask_theta,
        boundary=boundary,
        omega_flat=np.flatnonzero(mask_omega.ravel()),
    )


@dataclass(frozen=True)
class PerturbationField:
    """Admissible boundary perturbation direction.

    Two representations: an analytic rectangle family (face dilation with a
    smooth profile along the face; profile identically one keeps the perturbed
    domain a rectangle, enabling the re-solve oracle) or raw normal-trace
    samples, one per boundary point.

    Only the sup-norm of the normal trace is reported as the perturbation
    size; the full W^{3,inf} norm is not accessible from the boundary data.
    """

    kind: str  # "face" | "samples"
    face: Optional[str] = None
    profile: Optional[Callable[[np.ndarray], np.ndarray]] = None
    samples: Optional[np.ndarray] = None

    @classmethod
    def face_dilation(cls, face: str, profile: Optional[Callable] = None) -> "PerturbationField":
        if face not in FACES:
            raise InvalidSpec(f"face must be one of {FACES}, got {face!r}")
        return cls(kind="face", face=face, profile=profile)

    @classmethod
    def from_samples(cls, values: Sequence[float]) -> "PerturbationField":
        return cls(kind="samples", samples=np.asarray(values, dtype=float))

    @property
    def is_pure_dilation(self) -> bool:
        return self.kind == "face" and self.profile is None

    def sup_normal_trace(self, b: BoundaryGeometry) -> float:
        return float(np.max(np.abs(normal_component(self, b))))


def normal_component(v: PerturbationField, b: BoundaryGeometry) -> np.ndarray:
    """Per-boundary-point value of V.n."""
    if v.kind == "samples":
        if v.samples.shape != (b.n_points,):
            raise DimensionMismatch(
                f"normal trace has {v.samples.shape[0]} samples, boundary has {b.n_points} points"
            )
        return v.samples.copy()
    out = np.zeros(b.n_points)
    on_face = b.face_mask(v.face)
    if v.profile is None:
        out[on_face] = 1.0
    else:
        out[on_face] = np.asarray(v.profile(b.face_coord[on_face]), dtype=float)
    return out
