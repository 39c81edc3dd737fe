"""Uniform cell-centered grids, discrete densities, and discrete calculus.

Every other module works on these types.  Grids live on a box (1-D or 2-D)
with no-flux boundaries; densities are nonnegative cell values with unit
discrete mass.  All values are immutable after construction and every
operation is a pure function, so concurrent use is safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

MASS_TOL = 1e-12            # unit-mass invariant on every Density
MASS_RENORM_WINDOW = 1e-6   # constructor absorbs drift up to this, errors beyond


class GridError(ValueError):
    """Mismatched grids or malformed grid/density data."""


def _axis_tuple(value, dim, kind):
    if np.isscalar(value):
        return (kind(value),) * dim
    out = tuple(kind(v) for v in value)
    if len(out) != dim:
        raise GridError(f"expected {dim} per-axis values, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid on a box domain.

    Cell centers sit at ``lower + (j + 1/2) * spacing`` on each axis.  Only
    dimensions 1 and 2 are supported; the boundary is always the no-flux box.
    """

    lower: tuple
    upper: tuple
    cells: tuple

    def __post_init__(self):
        lo = (self.lower,) if np.isscalar(self.lower) else tuple(self.lower)
        dim = len(lo)
        if dim not in (1, 2):
            raise GridError(f"only 1-D and 2-D grids are supported, got dim={dim}")
        object.__setattr__(self, "lower", _axis_tuple(self.lower, dim, float))
        object.__setattr__(self, "upper", _axis_tuple(self.upper, dim, float))
        object.__setattr__(self, "cells", _axis_tuple(self.cells, dim, int))
        for lo, hi, n in zip(self.lower, self.upper, self.cells):
            if not hi > lo:
                raise GridError(f"upper bound {hi} must exceed lower bound {lo}")
            if n <= 0:
                raise GridError(f"cell count must be positive, got {n}")

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def shape(self) -> tuple:
        return self.cells

    @cached_property
    def spacing(self) -> tuple:
        return tuple((hi - lo) / n for lo, hi, n in zip(self.lower, self.upper, self.cells))

    @cached_property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @cached_property
    def axes(self) -> tuple:
        """Per-axis cell-center coordinates."""
        out = []
        for lo, dx, n in zip(self.lower, self.spacing, self.cells):
            ax = lo + (np.arange(n) + 0.5) * dx
            ax.setflags(write=False)
            out.append(ax)
        return tuple(out)

    @cached_property
    def edges(self) -> tuple:
        """Per-axis cell-edge coordinates (length cells+1)."""
        out = []
        for lo, hi, n in zip(self.lower, self.upper, self.cells):
            e = np.linspace(lo, hi, n + 1)
            e.setflags(write=False)
            out.append(e)
        return tuple(out)

    @cached_property
    def centers(self) -> np.ndarray:
        """Cell-center points, shape ``(*shape, dim)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack(mesh, axis=-1)
        pts.setflags(write=False)
        return pts

    @cached_property
    def center_sqnorm(self) -> np.ndarray:
        """|x|^2 at cell centers, shape ``shape``."""
        q = np.sum(self.centers**2, axis=-1)
        q.setflags(write=False)
        return q

    def same_as(self, other: "Grid") -> bool:
        return (
            self.lower == other.lower
            and self.upper == other.upper
            and self.cells == other.cells
        )

    def require_same(self, other: "Grid"):
        if not self.same_as(other):
            raise GridError("operands live on different grids")


def _check_values(grid: Grid, values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != grid.shape:
        raise GridError(f"values shape {arr.shape} does not match grid shape {grid.shape}")
    return arr


@dataclass(frozen=True)
class Density:
    """Nonnegative cell values with unit discrete mass.

    Construction rejects negative values outright and renormalizes the mass
    only when the drift is within ``MASS_RENORM_WINDOW``; anything larger is
    an error, since it signals a broken producer rather than round-off.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        arr = _check_values(self.grid, self.values)
        if np.any(arr < 0.0):
            raise GridError(f"density has negative values (min {arr.min():g})")
        if not np.all(np.isfinite(arr)):
            raise GridError("density has non-finite values")
        mass = float(arr.sum()) * self.grid.cell_volume
        if abs(mass - 1.0) > MASS_RENORM_WINDOW:
            raise GridError(f"density mass {mass!r} is outside the renormalization window")
        if mass != 1.0:
            arr = arr / mass
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def mass(self) -> float:
        return float(self.values.sum()) * self.grid.cell_volume

    def cell_masses(self) -> np.ndarray:
        return self.values * self.grid.cell_volume


@dataclass(frozen=True)
class GridField:
    """Scalar or vector cell values (potentials, gradients, pressures)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.shape != self.grid.shape and arr.shape != self.grid.shape + (self.grid.dim,):
            raise GridError(
                f"field shape {arr.shape} matches neither scalar {self.grid.shape} "
                f"nor vector {self.grid.shape + (self.grid.dim,)}"
            )
        if not np.all(np.isfinite(arr)):
            raise GridError("field has non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def is_vector(self) -> bool:
        return self.values.shape != self.grid.shape


def integrate(field: GridField, rho: Density) -> float:
    """Duality pairing of a scalar field against a density: sum f*rho*|cell|."""
    field.grid.require_same(rho.grid)
    if field.is_vector:
        raise GridError("integrate expects a scalar field")
    return float(np.sum(field.values * rho.values)) * rho.grid.cell_volume


def second_moment(rho: Density) -> float:
    """Second moment sum |x|^2 rho |cell| of a density."""
    return float(np.sum(rho.grid.center_sqnorm * rho.values)) * rho.grid.cell_volume


def discrete_gradient(field: GridField) -> GridField:
    """Per-axis gradient: central differences inside, one-sided at the boundary.

    Exact on affine fields; the one-sided boundary stencils are consistent
    with no-flux data because transport never needs ghost values.
    """
    if field.is_vector:
        raise GridError("discrete_gradient expects a scalar field")
    grid = field.grid
    comps = np.gradient(field.values, *grid.spacing, edge_order=1)
    if grid.dim == 1:
        comps = [comps]
    return GridField(grid, np.stack(comps, axis=-1))


def _offset_samples(kernel, grid: Grid) -> np.ndarray:
    """Sample a kernel at every pairwise cell-center offset."""
    if callable(kernel):
        offs = [np.arange(1 - n, n) * dx for n, dx in zip(grid.cells, grid.spacing)]
        mesh = np.meshgrid(*offs, indexing="ij")
        pts = np.stack(mesh, axis=-1)
        w = np.asarray(kernel(pts), dtype=float)
    else:
        w = np.asarray(kernel, dtype=float)
    expected = tuple(2 * n - 1 for n in grid.cells)
    if w.shape != expected:
        raise GridError(f"offset samples shape {w.shape} != expected {expected}")
    return w


def convolve(kernel, rho: Density, method: str = "auto") -> GridField:
    """Convolve a kernel with a density: (W*rho)(x_c) = sum W(x_c - x_c') rho_c' |cell|.

    ``kernel`` is either a function of the offset (evaluated analytically at
    every pairwise offset) or an array already sampled on the offset grid.
    ``method='direct'`` is the reference double sum; the FFT path matches it
    to 1e-10 and is the default for larger grids.
    """
    grid = rho.grid
    w = _offset_samples(kernel, grid)
    if method == "auto":
        method = "direct" if rho.values.size <= 64 else "fft"
    if method == "direct":
        # reference: explicit sum over source cells
        n = grid.cells
        if grid.dim == 1:
            j = np.arange(n[0])
            mat = w[j[:, None] - j[None, :] + n[0] - 1]
            out = mat @ rho.values
        else:
            out = _direct_2d(w, rho.values, n)
    elif method == "fft":
        full = fftconvolve(w, rho.values, mode="full")
        sl = tuple(slice(n - 1, 2 * n - 1) for n in grid.cells)
        out = full[sl]
    else:
        raise GridError(f"unknown convolve method {method!r}")
    return GridField(grid, out * grid.cell_volume)


def _direct_2d(w, values, n):
    out = np.zeros(n)
    # loop over target rows; columns handled vectorized
    j1 = np.arange(n[1])
    dcol = j1[:, None] - j1[None, :] + n[1] - 1
    for a in range(n[0]):
        drow = a - np.arange(n[0]) + n[0] - 1
        block = w[drow[:, None, None], dcol[None, :, :]]  # (n0, n1, n1)
        out[a] = np.einsum("cbd,cd->b", block, values)
    return out


# ---------------------------------------------------------------------------
# density snapshot files
#
# Format: a `# grid:` header followed by one CSV row per cell.  Floats are
# written with 17 significant digits so the round trip is bit-exact.

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_density(rho: Density, path) -> None:
    grid = rho.grid
    header = ",".join(
        [str(grid.dim)]
        + [_fmt(v) for v in grid.lower]
        + [_fmt(v) for v in grid.upper]
        + [str(n) for n in grid.cells]
    )
    lines = [f"# grid: {header}"]
    if grid.dim == 1:
        lines.append("index,x,value")
        x = grid.axes[0]
        for i, v in enumerate(rho.values):
            lines.append(f"{i},{_fmt(x[i])},{_fmt(v)}")
    else:
        lines.append("index,x,y,value")
        pts = grid.centers.reshape(-1, 2)
        vals = rho.values.ravel()
        for i in range(vals.size):
            lines.append(f"{i},{_fmt(pts[i, 0])},{_fmt(pts[i, 1])},{_fmt(vals[i])}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_density(path) -> Density:
    text = Path(path).read_text().strip().splitlines()
    if not text or not text[0].startswith("# grid:"):
        raise GridError(f"{path}: missing '# grid:' header")
    fields = text[0].split(":", 1)[1].strip().split(",")
    dim = int(fields[0])
    lower = tuple(float(v) for v in fields[1 : 1 + dim])
    upper = tuple(float(v) for v in fields[1 + dim : 1 + 2 * dim])
    cells = tuple(int(v) for v in fields[1 + 2 * dim : 1 + 3 * dim])
    grid = Grid(lower, upper, cells)
    rows = text[2:]  # skip column header
    n_total = int(np.prod(cells))
    if len(rows) != n_total:
        raise GridError(f"{path}: expected {n_total} rows, found {len(rows)}")
    values = np.empty(n_total)
    for row in rows:
        parts = row.split(",")
        values[int(parts[0])] = float(parts[-1])
    return Density(grid, values.reshape(cells))
