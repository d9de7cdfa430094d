"""Barrier functionals and their linearized derivative rows.

Every barrier ``H`` produces rows ``A U >= b`` over the flat velocity vector ``U``
(ordered cell-major, component-minor).  Rows are built from the same donor-cell
divergence operator ``D`` used by the advection step, so that along the frozen
upwind directions ``dH/dt = row . U`` holds for the semi-discrete system.

With ``rho_dot = -D U`` an integral functional ``H = beta - sum h(rho_k) vol``
has ``dH/dt = sum_k h'(rho_k) vol (D U)_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.signal import fftconvolve

from .errors import DomainError, PreconditionError, ShapeError, SupportError
from .grid import (
    MASS_TOL,
    ZERO_DENSITY,
    DensityField,
    Grid,
    VelocityField,
    divergence_operator,
    entropy,
    face_stencils,
    total_mass,
    w2_1d,
)
from .transport import SinkhornParams, TransportMap, transport_map

ACTIVATION = 1e-8


@dataclass(frozen=True)
class ClassK:
    lam: float = 5.0
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError("only linear class-K maps are supported")
        if not self.lam > 0:
            raise ValueError("class-K rate must be positive")

    def __call__(self, s):
        return self.lam * np.asarray(s, dtype=float) if np.ndim(s) else self.lam * float(s)


def comparison_system(h0: float, alpha: ClassK, s, t_end: float, steps: int = 1000, method: str = "exact"):
    """Integrate ``dh/dt = -alpha(h) + s(t)`` on ``[0, t_end]``; returns ``(t, h)``.

    ``exact`` holds ``s`` at the step midpoint and integrates the linear part in
    closed form, ``rk`` hands the ODE to an adaptive Runge-Kutta solver.
    """
    t = np.linspace(0.0, t_end, steps + 1)
    lam = alpha.lam
    if method == "rk":
        from scipy.integrate import solve_ivp

        sol = solve_ivp(lambda tt, h: -lam * h + s(tt), (0.0, t_end), [h0], t_eval=t, rtol=1e-10, atol=1e-13,
                        max_step=t_end / steps)
        return sol.t, sol.y[0]
    dt = t_end / steps
    decay = math.exp(-lam * dt)
    gain = -math.expm1(-lam * dt) / lam
    h = np.empty(steps + 1)
    h[0] = h0
    for k in range(steps):
        h[k + 1] = decay * h[k] + gain * s(t[k] + 0.5 * dt)
    return t, h


@dataclass(frozen=True)
class ConstraintRow:
    """A single ``coeffs . U >= rhs`` row, with sparse coefficients."""

    coeffs: sp.csr_matrix
    rhs: float
    label: str = ""

    def lhs(self, U) -> float:
        return float((self.coeffs @ np.asarray(U, dtype=float))[0])

    def satisfied(self, U, tol=0.0) -> bool:
        return self.lhs(U) >= self.rhs - tol


@dataclass
class RowBlock:
    """Stacked rows ``A U >= b`` contributed by one barrier."""

    A: sp.csr_matrix
    b: np.ndarray
    kind: str
    cells: np.ndarray | None = None

    def __len__(self):
        return self.A.shape[0]

    def row(self, i) -> ConstraintRow:
        return ConstraintRow(self.A[i], float(self.b[i]), self.kind)

    def __iter__(self):
        return (self.row(i) for i in range(len(self)))

    def lhs(self, U) -> np.ndarray:
        return self.A @ np.asarray(U, dtype=float)

    @staticmethod
    def empty(n, kind):
        return RowBlock(sp.csr_matrix((0, n)), np.zeros(0), kind, np.zeros(0, dtype=int))


class LinearizationContext:
    """Shared per-step data: density, frozen upwind direction and the divergence operator.

    ``donor`` is the density carried by the face fluxes (default ``rho``).  The
    filter passes the predicted post-step density so that rows match the
    implicit update rather than the instantaneous derivative.
    """

    def __init__(self, rho: DensityField, direction: VelocityField | None = None, maps: dict | None = None,
                 donor: DensityField | None = None):
        self.rho = rho
        self.grid = rho.grid
        self.donor = donor if donor is not None else rho
        self.direction = direction if direction is not None else VelocityField.zeros(rho.grid)
        self.D = divergence_operator(self.donor, self.direction)
        self.maps = maps if maps is not None else {}

    @property
    def n(self) -> int:
        return self.grid.size * self.grid.dim

    def transport(self, target: DensityField, params: SinkhornParams | None = None) -> TransportMap:
        key = id(target)
        if key not in self.maps:
            self.maps[key] = transport_map(self.rho, target, params)
        return self.maps[key]


def _context(rho, direction=None, ctx=None):
    if ctx is not None:
        return ctx
    return LinearizationContext(rho, direction)


def _integral_row(weights: np.ndarray, ctx: LinearizationContext) -> sp.csr_matrix:
    w = np.asarray(weights, dtype=float).ravel() * ctx.grid.cell_volume
    return sp.csr_matrix(w[None, :] @ ctx.D)


def general_integral_hdot(dh_drho, rho: DensityField, direction: VelocityField | None = None, region=None,
                          ctx: LinearizationContext | None = None) -> sp.csr_matrix:
    """Row ``r`` with ``r . U = d/dt (beta - int_S h(x, rho))`` along ``rho_dot = -div(rho U)``.

    ``dh_drho(x, rho)`` is evaluated at the cell centres; ``region`` is a boolean
    mask (default: whole grid).
    """
    ctx = _context(rho, direction, ctx)
    g = rho.grid
    w = np.asarray(dh_drho(g.centers(), rho.values), dtype=float)
    w = np.broadcast_to(w, g.shape)
    if region is not None:
        w = np.where(region, w, 0.0)
    return _integral_row(w, ctx)


def normalize_region(region, dim: int) -> tuple:
    """Region as a tuple of boxes, each a tuple of per-axis ``(lo, hi)`` pairs.

    Accepts a single box (``(3, 7)`` in 1D, ``[(a, b), (c, d)]`` in 2D) or a list of boxes.
    """
    arr = np.asarray(region, dtype=float)
    if arr.ndim == 1 and dim == 1:
        arr = arr.reshape(1, 1, 2)
    elif arr.ndim == 2 and dim == 1:
        arr = arr.reshape(-1, 1, 2)
    elif arr.ndim == 2 and dim == 2:
        arr = arr.reshape(1, 2, 2)
    if arr.ndim != 3 or arr.shape[1:] != (dim, 2):
        raise ShapeError(f"cannot read {region!r} as a union of {dim}D boxes")
    return tuple(tuple(tuple(float(v) for v in ax) for ax in box) for box in arr)


def region_mask(grid: Grid, region) -> np.ndarray:
    """Cells whose centres fall in a union of axis-aligned boxes; each box must lie inside the grid."""
    mask = np.zeros(grid.shape, dtype=bool)
    for box in normalize_region(region, grid.dim):
        if not grid.contains_box(box):
            raise DomainError(f"region {box} lies outside the grid {grid.bounds}")
        mask |= grid.box_mask(box)
    return mask


# ---------------------------------------------------------------------------
# barrier catalog


@dataclass(frozen=True)
class Barrier:
    """Base class; ``value`` is ``>= 0`` (scalar or per cell) on the safe set."""

    alpha: ClassK = field(default_factory=ClassK)
    kind = "barrier"
    pointwise = False

    def value(self, rho: DensityField):
        raise NotImplementedError

    def margin(self, rho: DensityField) -> float:
        v = self.value(rho)
        if np.ndim(v):
            v = np.asarray(v)
            return float(v.min()) if v.size else np.inf
        return float(v)

    def rows(self, ctx: LinearizationContext) -> RowBlock:
        raise NotImplementedError

    def hdot_row(self, rho, direction=None, ctx=None) -> ConstraintRow:
        block = self.rows(_context(rho, direction, ctx))
        return block.row(0)

    def _scalar_block(self, row, value, ctx):
        return RowBlock(sp.csr_matrix(row), np.array([-self.alpha(value)]), self.kind)


@dataclass(frozen=True)
class ObstacleBarrier(Barrier):
    """``H = eps - int_O rho``: keep at most ``eps`` mass inside the obstacle."""

    region: tuple = ()
    epsilon: float = 1e-3
    kind = "obstacle"

    def mask(self, grid):
        return region_mask(grid, self.region)

    def value(self, rho):
        return obstacle_value(rho, self.region, self.epsilon)

    def rows(self, ctx):
        row = _integral_row(self.mask(ctx.grid).astype(float), ctx)
        return self._scalar_block(row, self.value(ctx.rho), ctx)


@dataclass(frozen=True)
class ConflictBarrier(Barrier):
    """``H = eps - H^d``: bound the mass of pairs closer than ``d``."""

    d: float = 0.1
    epsilon: float = 0.1
    kind = "conflict"
    sign = 1.0

    def value(self, rho):
        return self.epsilon - conflict_value(rho, self.d)

    def rows(self, ctx):
        W = neighborhood_mass(ctx.rho, self.d)
        row = _integral_row(self.sign * 2.0 * W, ctx)
        return self._scalar_block(row, self.value(ctx.rho), ctx)


@dataclass(frozen=True)
class CohesionBarrier(ConflictBarrier):
    """``H = H^d - (1 - eps)``: most pairs stay within distance ``d``."""

    kind = "cohesion"
    sign = -1.0

    def value(self, rho):
        return cohesion_value(rho, self.d) - (1.0 - self.epsilon)


@dataclass(frozen=True)
class KLBarrier(Barrier):
    """``H = beta - KL(rho || eta)``."""

    eta: DensityField | None = None
    beta: float = 1.0
    kind = "kl"

    def value(self, rho):
        return kl_value(rho, self.eta, self.beta)

    def rows(self, ctx):
        _check_support(ctx.rho, self.eta)
        r = np.maximum(ctx.rho.values, ZERO_DENSITY)
        e = np.maximum(self.eta.values, ZERO_DENSITY)
        row = _integral_row(np.log(r / e) + 1.0, ctx)
        return self._scalar_block(row, self.value(ctx.rho), ctx)


@dataclass(frozen=True)
class EntropyBarrier(Barrier):
    """Entropy lower bound ``H = entropy(rho) - eps``."""

    epsilon: float = 3.0
    kind = "entropy"

    def value(self, rho):
        return entropy(rho) - self.epsilon

    def rows(self, ctx):
        r = np.maximum(ctx.rho.values, ZERO_DENSITY)
        row = _integral_row(np.log(r) + 1.0, ctx)
        return self._scalar_block(row, self.value(ctx.rho), ctx)


@dataclass(frozen=True)
class WassersteinBarrier(Barrier):
    """``H = beta - W2^2(rho, target)/2``."""

    target: DensityField | None = None
    beta: float = 1.0
    sinkhorn: SinkhornParams | None = None
    kind = "wasserstein"

    def value(self, rho):
        return wasserstein_value(rho, self.target, self.beta, self.sinkhorn)

    def rows(self, ctx):
        T = ctx.transport(self.target, self.sinkhorn)
        row = potential_row(T, ctx)
        half_w2 = 0.5 * T.objective
        return RowBlock(row, np.array([-self.alpha(self.beta - half_w2)]), self.kind)


def potential_row(T: TransportMap, ctx: LinearizationContext) -> sp.csr_matrix:
    """Row ``r`` with ``r . U = -d/dt (W2^2 / 2)`` from the potential ``phi`` (grad phi = x - T)."""
    if T.potential is None:
        raise PreconditionError("transport map carries no potential")
    return _integral_row(T.potential, ctx)


@dataclass(frozen=True)
class PointwiseBarrier(Barrier):
    """Per-cell bound on the density: a cap ``rho <= profile`` or a floor ``rho >= profile``.

    ``profile`` is either a grid array (inf/0 where inactive) or a scalar applied on ``region``.
    """

    bound: object = 0.0
    region: tuple | None = None
    upper: bool = True
    activation: float = ACTIVATION

    @property
    def kind(self):
        return "cap" if self.upper else "floor"

    pointwise = True

    def profile(self, grid: Grid) -> np.ndarray:
        if np.ndim(self.bound):
            p = np.asarray(self.bound, dtype=float)
            if p.shape != grid.shape:
                raise ShapeError("profile does not match the grid")
        else:
            p = np.full(grid.shape, float(self.bound))
        if np.any(p < 0):
            raise ValueError("density profiles must be nonnegative")
        if self.region is not None:
            inactive = np.inf if self.upper else 0.0
            p = np.where(region_mask(grid, self.region), p, inactive)
        return p

    def active_cells(self, rho: DensityField, donor: DensityField | None = None) -> np.ndarray:
        p = self.profile(rho.grid)
        constrained = np.isfinite(p) if self.upper else p > 0
        near = near_support(rho, self.activation)
        if donor is not None and donor is not rho:
            near |= near_support(donor, self.activation)
        return constrained & near

    def value(self, rho):
        p = self.profile(rho.grid)
        v = p - rho.values if self.upper else rho.values - p
        return np.where(np.isfinite(v), v, np.inf)

    def margin(self, rho):
        v = self.value(rho)
        cells = np.isfinite(self.profile(rho.grid)) if self.upper else self.profile(rho.grid) > 0
        return float(v[cells].min()) if cells.any() else np.inf

    def rows(self, ctx):
        cells = np.flatnonzero(self.active_cells(ctx.rho, ctx.donor).ravel())
        if cells.size == 0:
            return RowBlock.empty(ctx.n, self.kind)
        s = 1.0 if self.upper else -1.0
        A = (s * ctx.D[cells]).tocsr()
        b = -self.alpha(self.value(ctx.rho).ravel()[cells])
        return RowBlock(A, b, self.kind, cells)


def CapBarrier(bound, region=None, alpha=None, activation=ACTIVATION):
    return PointwiseBarrier(alpha=alpha or ClassK(), bound=bound, region=region, upper=True, activation=activation)


def FloorBarrier(bound, region=None, alpha=None, activation=ACTIVATION):
    return PointwiseBarrier(alpha=alpha or ClassK(), bound=bound, region=region, upper=False, activation=activation)


def cap_rows(rho, rho_max, alpha: ClassK | None = None, region=None, direction=None, ctx=None) -> list:
    return list(CapBarrier(rho_max, region, alpha).rows(_context(rho, direction, ctx)))


def floor_rows(rho, rho_min, alpha: ClassK | None = None, region=None, direction=None, ctx=None) -> list:
    return list(FloorBarrier(rho_min, region, alpha).rows(_context(rho, direction, ctx)))


def near_support(rho: DensityField, threshold=ACTIVATION) -> np.ndarray:
    """Cells with ``rho > threshold`` or sharing a face with such a cell."""
    on = rho.values > threshold
    out = on.copy()
    for a in range(rho.grid.dim):
        lo = [slice(None)] * rho.grid.dim
        hi = [slice(None)] * rho.grid.dim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        out[tuple(lo)] |= on[tuple(hi)]
        out[tuple(hi)] |= on[tuple(lo)]
    return out


# ---------------------------------------------------------------------------
# functional values and stand-alone row builders


def obstacle_value(rho: DensityField, region, epsilon: float) -> float:
    m = region_mask(rho.grid, region)
    return float(epsilon - np.sum(rho.values[m]) * rho.grid.cell_volume)


def obstacle_hdot_row(rho, region, alpha: ClassK, epsilon, direction=None, ctx=None) -> ConstraintRow:
    return ObstacleBarrier(alpha, normalize_region(region, rho.grid.dim), epsilon).hdot_row(rho, direction, ctx)


def _disk_stencil(grid: Grid, d: float) -> np.ndarray:
    half = [int(np.floor(d / h + 1e-12)) for h in grid.spacing]
    axes = [np.arange(-k, k + 1) * h for k, h in zip(half, grid.spacing)]
    mesh = np.meshgrid(*axes, indexing="ij")
    r2 = sum(m**2 for m in mesh)
    return (r2 <= d * d * (1 + 1e-12)).astype(float)


def neighborhood_mass(rho: DensityField, d: float) -> np.ndarray:
    """``W(x_k) = sum_{l : |x_k - x_l| <= d} rho_l vol`` via an exact disk-stencil convolution."""
    if not d > 0:
        raise ValueError("d must be positive")
    K = _disk_stencil(rho.grid, d)
    W = fftconvolve(rho.values, K, mode="same") if K.size > 1 else rho.values.copy()
    return np.maximum(W, 0.0) * rho.grid.cell_volume


def conflict_value(rho: DensityField, d: float) -> float:
    """``H^d = sum_k sum_{|x_k - x_l| <= d} rho_k rho_l vol^2``."""
    W = neighborhood_mass(rho, d)
    return float(np.sum(rho.values * W) * rho.grid.cell_volume)


def cohesion_value(rho: DensityField, d: float) -> float:
    return conflict_value(rho, d)


def conflict_hdot_row(rho, d, alpha: ClassK, epsilon, direction=None, ctx=None) -> ConstraintRow:
    return ConflictBarrier(alpha, d, epsilon).hdot_row(rho, direction, ctx)


def ball_measure(dim: int, d: float) -> float:
    return 2 * d if dim == 1 else np.pi * d * d


def _check_support(rho, eta):
    if eta is None:
        raise PreconditionError("reference density required")
    if rho.grid != eta.grid:
        raise ShapeError("densities live on different grids")
    if np.any((rho.values > ZERO_DENSITY) != (eta.values > ZERO_DENSITY)):
        raise SupportError("KL barrier needs supp(rho) == supp(eta)")


def kl_value(rho: DensityField, eta: DensityField, beta: float) -> float:
    _check_support(rho, eta)
    s = rho.values > ZERO_DENSITY
    r, e = rho.values[s], eta.values[s]
    return float(beta - np.sum(r * np.log(r / e)) * rho.grid.cell_volume)


def kl_hdot_row(rho, eta, alpha: ClassK, beta, direction=None, ctx=None) -> ConstraintRow:
    return KLBarrier(alpha, eta, beta).hdot_row(rho, direction, ctx)


def kl_continuous_coefficients(rho: DensityField, eta: DensityField) -> np.ndarray:
    """Pointwise form ``-(grad rho / rho - grad eta / eta) rho vol`` of the KL derivative."""
    from .grid import gradient

    _check_support(rho, eta)
    g = rho.grid
    r = np.maximum(rho.values, ZERO_DENSITY)
    e = np.maximum(eta.values, ZERO_DENSITY)
    c = -(gradient(r, g) / r[..., None] - gradient(e, g) / e[..., None]) * rho.values[..., None]
    return (c * g.cell_volume).reshape(-1)


def wasserstein_value(rho, target, beta, sinkhorn: SinkhornParams | None = None) -> float:
    for r in (rho, target):
        if abs(total_mass(r) - 1.0) > MASS_TOL:
            raise PreconditionError("Wasserstein barrier requires unit-mass densities")
    if rho.grid.dim == 1:
        w2 = w2_1d(rho, target)
    else:
        return float(beta - 0.5 * transport_map(rho, target, sinkhorn).objective)
    return float(beta - 0.5 * w2 * w2)


def wasserstein_hdot_row(rho, target, alpha: ClassK, beta, direction=None, ctx=None) -> ConstraintRow:
    return WassersteinBarrier(alpha, target, beta).hdot_row(rho, direction, ctx)


def entropy_barrier(rho, epsilon, alpha: ClassK, direction=None, ctx=None):
    b = EntropyBarrier(alpha, epsilon)
    return b.value(rho), b.hdot_row(rho, direction, ctx)


# ---------------------------------------------------------------------------
# upwind-consistency guards


def upwind_guards(block_A: sp.csr_matrix, ctx: LinearizationContext, threshold=0.0) -> RowBlock:
    """Rows ``s_f (U_L + U_R)/2 >= 0`` for every face whose unknowns carry barrier coefficients.

    The barrier rows are exact only while each face keeps the donor chosen from
    the reference direction; these rows pin the face-velocity sign.
    """
    g = ctx.grid
    dim = g.dim
    n = ctx.n
    used = np.zeros(n, dtype=bool)
    if block_A.nnz:
        used[np.unique(block_A.tocoo().col)] = True
    rows, cols, vals = [], [], []
    count = 0
    for a, L, R, s, donor_rho in face_stencils(ctx.donor, ctx.direction):
        keep = (donor_rho > threshold) & (used[L * dim + a] | used[R * dim + a])
        k = np.flatnonzero(keep)
        if k.size == 0:
            continue
        ids = count + np.arange(k.size)
        rows += [ids, ids]
        cols += [L[k] * dim + a, R[k] * dim + a]
        vals += [0.5 * s[k], 0.5 * s[k]]
        count += k.size
    if count == 0:
        return RowBlock.empty(n, "guard")
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(count, n))
    return RowBlock(A.tocsr(), np.zeros(count), "guard")
