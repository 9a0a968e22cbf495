"""Uniform tensor-product grids and discrete field calculus.

Fields are numpy arrays shaped ``(nx, ny, nz)`` (row-major) attached to a
:class:`UniformGrid`.  Integration is tensor-product trapezoid quadrature,
differentiation is second-order central differences with one-sided
second-order stencils at the box faces.  All operations are pure; fields are
treated as immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, NegativeDensity, TargetOutOfRange

# Relative floor used globally to clamp tiny negative quadrature artifacts.
EPS_FLOOR = 1e-12


@dataclass(frozen=True)
class UniformGrid:
    """Axis-aligned box discretization with uniform spacing per axis."""

    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        if len(self.dims) != 3 or len(self.origin) != 3 or len(self.spacing) != 3:
            raise ValueError("dims, origin and spacing must have length 3")
        if any(n < 3 for n in self.dims):
            raise ValueError(f"central differences need dims >= 3, got {self.dims}")
        if any(h <= 0 for h in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @classmethod
    def cube(cls, n: int, lo: float, hi: float) -> "UniformGrid":
        """n**3 nodes on the cube [lo, hi]^3."""
        h = (hi - lo) / (n - 1)
        return cls((n, n, n), (lo, lo, lo), (h, h, h))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def node_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def axis_coords(self, axis: int) -> np.ndarray:
        """1D node coordinates along one axis (0, 1 or 2)."""
        n = self.dims[axis]
        return self.origin[axis] + self.spacing[axis] * np.arange(n)

    def meshgrid(self):
        """Coordinate arrays X, Y, Z of shape ``dims`` ('ij' indexing)."""
        return np.meshgrid(*(self.axis_coords(a) for a in range(3)), indexing="ij")

    def axis_weights(self, axis: int) -> np.ndarray:
        """1D trapezoid quadrature weights along one axis."""
        n = self.dims[axis]
        w = np.full(n, self.spacing[axis])
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def quad_weights(self) -> np.ndarray:
        """Full 3D tensor-product trapezoid weights, shape ``dims``."""
        wx, wy, wz = (self.axis_weights(a) for a in range(3))
        return wx[:, None, None] * wy[None, :, None] * wz[None, None, :]

    def same_as(self, other: "UniformGrid") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.origin, other.origin, rtol=0.0, atol=1e-12)
            and np.allclose(self.spacing, other.spacing, rtol=1e-12, atol=0.0)
        )

    def refine(self) -> "UniformGrid":
        """Grid with halved spacing on the same box (2n-1 nodes per axis)."""
        dims = tuple(2 * n - 1 for n in self.dims)
        spacing = tuple(h / 2 for h in self.spacing)
        return UniformGrid(dims, self.origin, spacing)


def _check_values(grid, values, comps=None, dtype=float):
    if dtype is None:
        arr = np.asarray(values)
        if not np.iscomplexobj(arr):
            arr = arr.astype(float)
    else:
        arr = np.asarray(values, dtype=dtype)
    want = grid.dims if comps is None else grid.dims + (comps,)
    if arr.shape != want:
        raise ValueError(f"values shape {arr.shape} does not match grid {want}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field contains non-finite entries")
    return arr


@dataclass(frozen=True)
class ScalarField:
    """Real scalar samples on a grid."""

    grid: UniformGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values))


@dataclass(frozen=True)
class ComplexField:
    """Complex scalar samples on a grid."""

    grid: UniformGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "values", _check_values(self.grid, self.values, dtype=complex)
        )


@dataclass(frozen=True)
class VectorField:
    """3-vector samples on a grid, shape ``dims + (3,)``.

    Normally real valued; gradients of complex fields produce a complex
    variant with the same layout.
    """

    grid: UniformGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "values", _check_values(self.grid, self.values, comps=3, dtype=None)
        )


@dataclass(frozen=True)
class MassProfile:
    """1D marginal density and its running cumulative along one axis."""

    axis: int
    knots: np.ndarray
    density: np.ndarray
    cumulative: np.ndarray

    @property
    def total(self) -> float:
        return float(self.cumulative[-1])


def require_same_grid(*objs):
    g0 = objs[0].grid
    for o in objs[1:]:
        if not g0.same_as(o.grid):
            raise GridMismatch(f"grids differ: {g0} vs {o.grid}")
    return g0


def integrate(f) -> float:
    """Tensor-product trapezoid quadrature of a ScalarField."""
    return float(np.sum(f.grid.quad_weights() * f.values))


def integrate_values(grid: UniformGrid, values: np.ndarray):
    """Quadrature of a bare sample array (real or complex) on ``grid``."""
    return np.sum(grid.quad_weights() * values)


def gradient(f) -> VectorField:
    """Second-order finite-difference gradient of a scalar/complex field.

    Central differences at interior nodes, one-sided second-order at the box
    faces (numpy ``gradient`` with ``edge_order=2``).
    """
    g = f.grid
    parts = np.gradient(f.values, *g.spacing, edge_order=2)
    return VectorField(g, np.stack(parts, axis=-1))


def gradient_values(grid: UniformGrid, values: np.ndarray) -> np.ndarray:
    """Gradient of a bare array; returns shape ``dims + (3,)``."""
    return np.stack(np.gradient(values, *grid.spacing, edge_order=2), axis=-1)


def curl(v: VectorField) -> VectorField:
    """Componentwise central-difference curl of a vector field."""
    g = v.grid
    hx, hy, hz = g.spacing
    vx, vy, vz = v.values[..., 0], v.values[..., 1], v.values[..., 2]
    dvz_dy = np.gradient(vz, hy, axis=1, edge_order=2)
    dvy_dz = np.gradient(vy, hz, axis=2, edge_order=2)
    dvx_dz = np.gradient(vx, hz, axis=2, edge_order=2)
    dvz_dx = np.gradient(vz, hx, axis=0, edge_order=2)
    dvy_dx = np.gradient(vy, hx, axis=0, edge_order=2)
    dvx_dy = np.gradient(vx, hy, axis=1, edge_order=2)
    c = np.stack([dvz_dy - dvy_dz, dvx_dz - dvz_dx, dvy_dx - dvx_dy], axis=-1)
    return VectorField(g, c)


def axis_marginal(grid: UniformGrid, values: np.ndarray, axis: int) -> np.ndarray:
    """Reduce a sample array to its 1D marginal along ``axis`` by quadrature
    over the two orthogonal axes.  Works for real and complex arrays."""
    other = [a for a in range(3) if a != axis]
    w = 1.0
    arr = values
    # weight the two orthogonal axes, then sum them out
    for a in other:
        shape = [1, 1, 1]
        shape[a] = grid.dims[a]
        arr = arr * grid.axis_weights(a).reshape(shape)
    return np.sum(arr, axis=tuple(other))


def marginal_profile(f: ScalarField, axis: int, *, eps_floor: float = EPS_FLOOR) -> MassProfile:
    """1D marginal of a nonnegative field plus its running trapezoid cumulative.

    Entries slightly below zero (quadrature artifacts down to
    ``-eps_floor * max``) are clamped; anything lower raises NegativeDensity.
    """
    vmax = float(np.max(np.abs(f.values))) if f.values.size else 0.0
    floor = eps_floor * max(vmax, 1e-300)
    if np.min(f.values) < -floor:
        raise NegativeDensity(
            f"density has entries below -{floor:.3e} (min {np.min(f.values):.3e})"
        )
    vals = np.clip(f.values, 0.0, None)
    dens = axis_marginal(f.grid, vals, axis)
    dens = np.clip(dens, 0.0, None)
    knots = f.grid.axis_coords(axis)
    h = f.grid.spacing[axis]
    cum = np.zeros_like(dens)
    cum[1:] = np.cumsum(0.5 * h * (dens[1:] + dens[:-1]))
    return MassProfile(axis=axis, knots=knots, density=dens, cumulative=cum)


def profile_inverse(p: MassProfile, target: float) -> float:
    """Smallest abscissa with cumulative(alpha) >= target.

    Linear interpolation between knots; -inf / +inf sentinels when the target
    sits at or beyond the ends of the mass range.
    """
    total = p.total
    eps = 1e-9 * max(total, 1.0)
    if target < -eps or target > total + eps:
        raise TargetOutOfRange(f"target {target} outside [0, {total}]")
    if target <= 0.0:
        return -np.inf
    if target >= total:
        return np.inf
    idx = int(np.searchsorted(p.cumulative, target, side="left"))
    idx = min(max(idx, 1), len(p.knots) - 1)
    c0, c1 = p.cumulative[idx - 1], p.cumulative[idx]
    if c1 <= c0:
        return float(p.knots[idx])
    t = (target - c0) / (c1 - c0)
    return float(p.knots[idx - 1] + t * (p.knots[idx] - p.knots[idx - 1]))


def masked_divide(num: np.ndarray, den: np.ndarray, *, floor: float):
    """Quotient evaluated where ``den > floor``; 0 outside.

    ``num`` may carry a trailing component axis (vector fields).  Returns
    (quotient, mask, coverage fraction of nodes inside the mask).
    """
    mask = den > floor
    if num.ndim == den.ndim + 1:
        den_b = den[..., None]
        where = np.broadcast_to(mask[..., None], num.shape)
    else:
        den_b = den
        where = mask
    out = np.zeros(num.shape, dtype=np.result_type(num, den))
    np.divide(num, den_b, out=out, where=where)
    coverage = float(np.count_nonzero(mask)) / mask.size
    return out, mask, coverage


def interior_mask(mask: np.ndarray, margin: int = 2) -> np.ndarray:
    """Erode a boolean mask so differential stencils stay inside it."""
    from scipy.ndimage import binary_erosion

    core = binary_erosion(mask, iterations=margin) if margin > 0 else mask
    # also drop the box faces where one-sided stencils apply
    inner = np.zeros_like(mask)
    inner[margin:-margin or None, margin:-margin or None, margin:-margin or None] = True
    return core & inner
