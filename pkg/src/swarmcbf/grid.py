"""Uniform grids, density/velocity fields and the upwind transport operators.

Cell ``k`` of a grid covers ``[origin + k*dx, origin + (k+1)*dx)`` per axis and
its value is the cell average.  Velocities live at cell centres; the flux
through an interior face uses the average of the two adjacent normal
components and the density of the donor (upwind) cell.  Faces on the domain
boundary carry no flux, so every operator here conserves mass exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    CFLError,
    DomainError,
    InvalidDomainError,
    PreconditionError,
    ShapeError,
    SolverFailure,
    UnsupportedDimensionError,
)

ZERO_DENSITY = 1e-30
MASS_TOL = 1e-6


@dataclass(frozen=True)
class Grid:
    origin: tuple
    spacing: tuple
    cells: tuple

    def __post_init__(self):
        if not (len(self.origin) == len(self.spacing) == len(self.cells)):
            raise InvalidDomainError("origin, spacing and cells must have one entry per axis")
        if self.dim not in (1, 2):
            raise UnsupportedDimensionError(f"only 1D and 2D grids are supported, got dim={self.dim}")
        if any(not (h > 0) for h in self.spacing):
            raise InvalidDomainError(f"spacing must be positive, got {self.spacing}")
        if any(n < 2 for n in self.cells):
            raise InvalidDomainError(f"need at least 2 cells per axis, got {self.cells}")

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def shape(self) -> tuple:
        return tuple(self.cells)

    @property
    def size(self) -> int:
        return int(np.prod(self.cells))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def bounds(self) -> list:
        return [(o, o + n * h) for o, h, n in zip(self.origin, self.spacing, self.cells)]

    def axis_centers(self, axis: int) -> np.ndarray:
        o, h, n = self.origin[axis], self.spacing[axis], self.cells[axis]
        return o + (np.arange(n) + 0.5) * h

    def axis_edges(self, axis: int) -> np.ndarray:
        o, h, n = self.origin[axis], self.spacing[axis], self.cells[axis]
        return o + np.arange(n + 1) * h

    def centers(self) -> np.ndarray:
        """Cell centres with shape ``cells + (dim,)``."""
        axes = [self.axis_centers(a) for a in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def points(self) -> np.ndarray:
        """Cell centres flattened to ``(size, dim)`` in C order."""
        return self.centers().reshape(-1, self.dim)

    def box_mask(self, box) -> np.ndarray:
        """Boolean mask of cells whose centre lies in the closed box."""
        box = _as_box(box, self.dim)
        c = self.centers()
        mask = np.ones(self.shape, dtype=bool)
        for a, (lo, hi) in enumerate(box):
            mask &= (c[..., a] >= lo) & (c[..., a] <= hi)
        return mask

    def contains_box(self, box, tol=1e-12) -> bool:
        box = _as_box(box, self.dim)
        return all(lo >= blo - tol and hi <= bhi + tol for (lo, hi), (blo, bhi) in zip(box, self.bounds))

    def contains_points(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        ok = np.ones(len(pts), dtype=bool)
        for a, (lo, hi) in enumerate(self.bounds):
            ok &= (pts[:, a] >= lo) & (pts[:, a] <= hi)
        return ok

    def header(self) -> str:
        vals = [self.dim, *self.origin, *self.spacing, *self.cells]
        return "# grid: " + ",".join(_fmt(v) for v in vals)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _as_box(box, dim) -> list:
    arr = np.asarray(box, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    if arr.shape != (dim, 2):
        raise ShapeError(f"box must have shape ({dim}, 2), got {arr.shape}")
    return [tuple(r) for r in arr]


def make_grid(bounds, cells) -> Grid:
    """Build a grid from per-axis intervals and cell counts.

    ``bounds`` may be a single ``(lo, hi)`` pair for 1D; ``cells`` may be an int.
    """
    b = np.asarray(bounds, dtype=float)
    if b.ndim == 1:
        b = b.reshape(1, 2)
    if b.ndim != 2 or b.shape[1] != 2:
        raise InvalidDomainError(f"bounds must be (lo, hi) pairs, got {bounds!r}")
    n = (int(cells),) * len(b) if np.isscalar(cells) else tuple(int(c) for c in cells)
    if len(n) != len(b):
        raise InvalidDomainError("bounds and cells disagree on the number of axes")
    for lo, hi in b:
        if not (hi > lo):
            raise InvalidDomainError(f"degenerate interval [{lo}, {hi}]")
    spacing = tuple(float((hi - lo) / c) for (lo, hi), c in zip(b, n))
    return Grid(tuple(float(lo) for lo in b[:, 0]), spacing, n)


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DensityField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != self.grid.shape:
            raise ShapeError(f"density values {vals.shape} do not match grid {self.grid.shape}")
        object.__setattr__(self, "values", vals)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def normalized(self) -> "DensityField":
        m = total_mass(self)
        if m <= 0:
            raise PreconditionError("cannot normalize a density with zero mass")
        return DensityField(self.grid, self.values / m)


@dataclass(frozen=True)
class VelocityField:
    grid: Grid
    values: np.ndarray
    support: np.ndarray | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, copy=True)
        g = self.grid
        if vals.shape == g.shape and g.dim == 1:
            vals = vals[..., None]
        if vals.shape != g.shape + (g.dim,):
            raise ShapeError(f"velocity values {vals.shape} do not match grid {g.shape + (g.dim,)}")
        if not np.all(np.isfinite(vals)):
            raise ShapeError("velocity field has non-finite entries")
        if self.support is not None:
            mask = np.asarray(self.support, dtype=bool)
            vals[~mask] = 0.0
            mask = mask.copy()
            mask.flags.writeable = False
            object.__setattr__(self, "support", mask)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid: Grid) -> "VelocityField":
        return cls(grid, np.zeros(grid.shape + (grid.dim,)))

    @classmethod
    def constant(cls, grid: Grid, v) -> "VelocityField":
        v = np.broadcast_to(np.asarray(v, dtype=float), (grid.dim,))
        return cls(grid, np.broadcast_to(v, grid.shape + (grid.dim,)))

    @classmethod
    def from_vector(cls, grid: Grid, U) -> "VelocityField":
        return cls(grid, np.asarray(U, dtype=float).reshape(grid.shape + (grid.dim,)))

    @property
    def flat(self) -> np.ndarray:
        """Unknown vector ``U`` ordered as (cell, component) in C order."""
        return self.values.reshape(-1)


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def append(self, t, rho, diag=None):
        if self.times and not t > self.times[-1]:
            raise ValueError("trajectory times must be strictly increasing")
        if self.snapshots and rho.grid != self.snapshots[0].grid:
            raise ShapeError("all snapshots must share one grid")
        self.times.append(float(t))
        self.snapshots.append(rho)
        if diag is not None:
            self.diagnostics.append(diag)

    def __len__(self):
        return len(self.times)


def _check_same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise ShapeError("fields are defined on different grids")
    return g


# ---------------------------------------------------------------------------
# integrals and differential operators


def total_mass(rho: DensityField) -> float:
    return float(np.sum(rho.values) * rho.grid.cell_volume)


def entropy(rho: DensityField) -> float:
    """Differential entropy ``-sum rho log rho * vol`` with 0 log 0 = 0."""
    v = rho.values
    pos = v > ZERO_DENSITY
    return float(-np.sum(v[pos] * np.log(v[pos])) * rho.grid.cell_volume)


def gradient(values, grid: Grid) -> np.ndarray:
    """Central differences inside, one-sided differences on boundary cells."""
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise ShapeError(f"field shape {values.shape} does not match grid {grid.shape}")
    parts = np.gradient(values, *grid.spacing, edge_order=1)
    if grid.dim == 1:
        parts = [parts]
    return np.stack(parts, axis=-1)


def _faces(grid: Grid):
    """Yield ``(axis, left, right)`` flat cell indices of every interior face."""
    idx = np.arange(grid.size).reshape(grid.shape)
    for a in range(grid.dim):
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        yield a, idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()


def face_velocities(u: VelocityField):
    """Normal velocity on each interior face, as a list of (axis, L, R, u_f)."""
    U = u.values.reshape(-1, u.grid.dim)
    return [(a, L, R, 0.5 * (U[L, a] + U[R, a])) for a, L, R in _faces(u.grid)]


def advection_matrix(u: VelocityField) -> sp.csr_matrix:
    """Sparse ``A`` with ``A @ rho = div(rho u)`` under donor-cell fluxes."""
    g = u.grid
    rows, cols, vals = [], [], []
    for a, L, R, uf in face_velocities(u):
        donor = np.where(uf >= 0, L, R)
        w = uf / g.spacing[a]
        rows += [L, R]
        cols += [donor, donor]
        vals += [w, -w]
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(g.size, g.size)
    )
    return A.tocsr()


def divergence_operator(rho: DensityField, direction: VelocityField) -> sp.csr_matrix:
    """Linear map ``U -> div(rho U)`` with upwind donors frozen from ``direction``.

    Returns a ``(cells, cells*dim)`` sparse matrix.  Evaluated at ``U = direction``
    it reproduces :func:`flux_divergence` exactly.
    """
    g = _check_same_grid(rho, direction)
    dim = g.dim
    r = rho.flat
    rows, cols, vals = [], [], []
    for a, L, R, uf in face_velocities(direction):
        donor = np.where(uf >= 0, L, R)
        c = 0.5 * r[donor] / g.spacing[a]
        for cell, sign in ((L, 1.0), (R, -1.0)):
            rows += [cell, cell]
            cols += [L * dim + a, R * dim + a]
            vals += [sign * c, sign * c]
    D = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(g.size, g.size * dim)
    )
    return D.tocsr()


def face_stencils(rho: DensityField, direction: VelocityField):
    """Per-face data used for upwind-consistency guards.

    Returns a list of ``(axis, L, R, sign, donor_density)`` arrays where ``sign`` is
    +1 when the frozen donor is the left cell.
    """
    r = rho.flat
    out = []
    for a, L, R, uf in face_velocities(direction):
        sign = np.where(uf >= 0, 1.0, -1.0)
        donor = np.where(uf >= 0, L, R)
        out.append((a, L, R, sign, r[donor]))
    return out


def flux_divergence(rho: DensityField, u: VelocityField) -> np.ndarray:
    g = _check_same_grid(rho, u)
    return (advection_matrix(u) @ rho.flat).reshape(g.shape)


# ---------------------------------------------------------------------------
# time stepping

IMPLICIT_TOL = 1e-10
CLAMP_TOL = 1e-8


def _clamp_positive(values: np.ndarray, mass_in: float, vol: float) -> np.ndarray:
    neg = values < 0
    if np.any(neg):
        clamped = -float(np.sum(values[neg])) * vol
        if clamped > CLAMP_TOL:
            raise SolverFailure("advection produced negative mass beyond round-off", clamped)
        values = np.where(neg, 0.0, values)
        m = float(np.sum(values)) * vol
        if m > 0:
            values = values * (mass_in / m)
    return values


def advect_implicit_upwind(rho: DensityField, u: VelocityField, dt: float) -> DensityField:
    """One backward-Euler step ``(I + dt A_u) rho_next = rho``.

    The system matrix is an M-matrix with unit column sums, so the update is
    positive and mass conserving for every ``dt``.
    """
    g = _check_same_grid(rho, u)
    if not dt > 0:
        raise ValueError("dt must be positive")
    A = advection_matrix(u)
    if A.nnz == 0 or not np.any(A.data):
        return DensityField(g, rho.values)
    M = (sp.identity(g.size, format="csc") + dt * A).tocsc()
    b = rho.flat
    try:
        x = spla.splu(M).solve(b)
    except RuntimeError as exc:
        raise SolverFailure(f"implicit upwind solve failed: {exc}", float("inf")) from exc
    res = float(np.max(np.abs(M @ x - b))) if b.size else 0.0
    scale = max(float(np.max(np.abs(b))), 1.0)
    if not np.isfinite(res) or res > IMPLICIT_TOL * scale:
        raise SolverFailure("implicit upwind residual above tolerance", res)
    x = _clamp_positive(x, float(np.sum(b)) * g.cell_volume, g.cell_volume)
    return DensityField(g, x.reshape(g.shape))


def explicit_dt_bound(u: VelocityField) -> float:
    """Largest ``dt`` for which the forward-Euler upwind step stays monotone."""
    A = advection_matrix(u)
    out_rate = float(np.max(A.diagonal())) if A.shape[0] else 0.0
    return math.inf if out_rate <= 0 else 1.0 / out_rate


def advect_explicit(rho: DensityField, u: VelocityField, dt: float) -> DensityField:
    g = _check_same_grid(rho, u)
    dt_max = explicit_dt_bound(u)
    if dt > dt_max * (1 + 1e-12):
        raise CFLError(dt, dt_max)
    new = rho.flat - dt * (advection_matrix(u) @ rho.flat)
    new = _clamp_positive(new, float(np.sum(rho.flat)) * g.cell_volume, g.cell_volume)
    return DensityField(g, new.reshape(g.shape))


# ---------------------------------------------------------------------------
# 1D distribution functions


@dataclass(frozen=True)
class Cdf1D:
    """Piecewise-linear CDF known at the cell edges of a 1D grid."""

    edges: np.ndarray
    values: np.ndarray

    def __call__(self, x):
        return np.interp(x, self.edges, self.values, left=0.0, right=float(self.values[-1]))


def _require_1d(grid: Grid):
    if grid.dim != 1:
        raise UnsupportedDimensionError(f"operation requires a 1D grid, got dim={grid.dim}")


def cdf_1d(rho: DensityField) -> Cdf1D:
    _require_1d(rho.grid)
    cum = np.concatenate([[0.0], np.cumsum(rho.values) * rho.grid.spacing[0]])
    cum = np.maximum.accumulate(np.clip(cum, 0.0, 1.0))
    return Cdf1D(rho.grid.axis_edges(0), cum)


def _quantile(F: Cdf1D, p, side: str):
    v, e = F.values, F.edges
    p = np.asarray(p, dtype=float)
    if side == "left":
        i = np.searchsorted(v, p, side="left")
        i = np.where(p <= 0, np.searchsorted(v, 0.0, side="right"), i)
    else:
        i = np.searchsorted(v, p, side="right")
    i = np.clip(i, 1, len(v) - 1)
    v0, v1 = v[i - 1], v[i]
    span = v1 - v0
    frac = np.where(span > 0, (p - v0) / np.where(span > 0, span, 1.0), 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    return e[i - 1] + frac * (e[i] - e[i - 1])


def quantile_1d(F: Cdf1D, p):
    """Left-continuous generalized inverse ``inf{x : F(x) >= p}`` by linear interpolation.

    ``p = 0`` maps to the left edge of the support.
    """
    parr = np.asarray(p, dtype=float)
    if np.any(parr < 0) or np.any(parr > 1) or np.any(~np.isfinite(parr)):
        raise DomainError("probability must lie in [0, 1]")
    out = _quantile(F, parr, "left")
    return float(out) if np.ndim(p) == 0 else out


def _require_unit_mass(*rhos):
    for r in rhos:
        m = total_mass(r)
        if abs(m - 1.0) > MASS_TOL:
            raise PreconditionError(f"density must have unit mass, got {m:.9g}")


def w2_1d(rho: DensityField, eta: DensityField) -> float:
    """2-Wasserstein distance between two piecewise-constant 1D densities.

    Both quantile functions are linear between the merged CDF breakpoints, so
    Simpson's rule on each piece integrates the squared gap exactly.
    """
    _require_1d(rho.grid)
    _require_1d(eta.grid)
    _require_unit_mass(rho, eta)
    Fr, Fe = cdf_1d(rho), cdf_1d(eta)
    p = np.unique(np.concatenate([Fr.values, Fe.values, [0.0, 1.0]]))
    p = p[(p >= 0) & (p <= 1)]
    a, b = p[:-1], p[1:]
    keep = b - a > 0
    a, b = a[keep], b[keep]
    m = 0.5 * (a + b)
    d0 = _quantile(Fr, a, "right") - _quantile(Fe, a, "right")
    d1 = _quantile(Fr, b, "left") - _quantile(Fe, b, "left")
    dm = _quantile(Fr, m, "left") - _quantile(Fe, m, "left")
    w2sq = float(np.sum((b - a) / 6.0 * (d0**2 + 4 * dm**2 + d1**2)))
    return math.sqrt(max(w2sq, 0.0))


# ---------------------------------------------------------------------------
# reference densities


def gaussian_density(grid: Grid, mean, cov_diag) -> DensityField:
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (grid.dim,))
    cov = np.broadcast_to(np.asarray(cov_diag, dtype=float), (grid.dim,))
    if np.any(cov <= 0):
        raise DomainError("covariance entries must be positive")
    c = grid.centers()
    q = np.sum((c - mean) ** 2 / cov, axis=-1)
    vals = np.exp(-0.5 * q) / np.sqrt((2 * np.pi) ** grid.dim * np.prod(cov))
    return DensityField(grid, vals).normalized()


def uniform_density(grid: Grid, box) -> DensityField:
    if not grid.contains_box(box):
        raise DomainError(f"box {box!r} is not inside the grid bounds {grid.bounds}")
    mask = grid.box_mask(box)
    if not mask.any():
        raise DomainError(f"box {box!r} contains no cell centre")
    return DensityField(grid, mask.astype(float)).normalized()


def mixture_density(grid: Grid, components) -> DensityField:
    """Weighted sum of ``(weight, DensityField)`` pairs, renormalized."""
    vals = sum(w * d.values for w, d in components)
    return DensityField(grid, vals).normalized()


# ---------------------------------------------------------------------------
# snapshot CSV


def write_field_csv(path, rho: DensityField | None = None, u: VelocityField | None = None, grid: Grid | None = None,
                    value_columns: Sequence[np.ndarray] | None = None):
    """Write a grid snapshot: header line, then ``index,x[,y],value[,vx,vy]`` rows."""
    g = grid or (rho.grid if rho is not None else u.grid)
    pts = g.points()
    cols = [np.arange(g.size)] + [pts[:, a] for a in range(g.dim)]
    if rho is not None:
        cols.append(rho.flat)
    if u is not None:
        U = u.values.reshape(-1, g.dim)
        cols += [U[:, a] for a in range(g.dim)]
    if value_columns is not None:
        cols += list(value_columns)
    with open(path, "w", newline="") as fh:
        fh.write(g.header() + "\n")
        for row in zip(*cols):
            fh.write(str(int(row[0])) + "," + ",".join(repr(float(v)) for v in row[1:]) + "\n")


def read_field_csv(path):
    """Inverse of :func:`write_field_csv`; returns ``(grid, density | None, velocity | None)``."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# grid:"):
            raise ShapeError(f"{path}: missing '# grid:' header")
        parts = header.split(":", 1)[1].split(",")
        dim = int(parts[0])
        origin = tuple(float(v) for v in parts[1:1 + dim])
        spacing = tuple(float(v) for v in parts[1 + dim:1 + 2 * dim])
        cells = tuple(int(v) for v in parts[1 + 2 * dim:1 + 3 * dim])
        grid = Grid(origin, spacing, cells)
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[0] != grid.size:
        raise ShapeError(f"{path}: expected {grid.size} rows, found {data.shape[0]}")
    extra = data.shape[1] - 1 - dim
    rho = DensityField(grid, data[:, 1 + dim].reshape(grid.shape)) if extra >= 1 else None
    u = None
    if extra >= 1 + dim:
        u = VelocityField(grid, data[:, 2 + dim:2 + 2 * dim].reshape(grid.shape + (dim,)))
    return grid, rho, u
