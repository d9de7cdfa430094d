"""Nominal velocity fields from optimal transport and gradient flows.

1D maps are exact (CDF inversion).  In 2D the map is the barycentric projection
of an entropic coupling computed by log-domain Sinkhorn.  On a regular grid the
squared-distance Gibbs kernel factorizes across axes, so the grid solver never
forms the cost matrix: each kernel application is a pair of 1D log-sum-exps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import (
    NonConvergenceError,
    NumericalError,
    PreconditionError,
    ScheduleExpired,
    ShapeError,
    SupportError,
    UnsupportedDimensionError,
)
from .grid import (
    MASS_TOL,
    ZERO_DENSITY,
    DensityField,
    Grid,
    VelocityField,
    cdf_1d,
    gradient,
    quantile_1d,
    total_mass,
)

SUPPORT_MASS = 1e-12
RUNG_ITERS = 2000
RUNG_TOL = 1e-4


@dataclass(frozen=True)
class TransportMap:
    grid: Grid
    target: np.ndarray
    potential: np.ndarray | None = None
    approximate: bool = False
    cost: float | None = None
    coupling: object = None
    dual_value: float | None = None

    def __post_init__(self):
        t = np.array(self.target, dtype=float)
        if t.shape == self.grid.shape and self.grid.dim == 1:
            t = t[..., None]
        if t.shape != self.grid.shape + (self.grid.dim,):
            raise ShapeError(f"map target {t.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(t)):
            raise NumericalError("transport map has non-finite entries")
        t.flags.writeable = False
        object.__setattr__(self, "target", t)

    def displacement(self) -> np.ndarray:
        return self.target - self.grid.centers()

    @property
    def w2(self) -> float | None:
        return None if self.cost is None else math.sqrt(max(self.cost, 0.0))

    @property
    def objective(self) -> float | None:
        """Squared-distance OT objective whose first variation is ``2 * potential``.

        Exact ``W2^2`` for 1D maps; the entropic dual value for Sinkhorn maps.
        """
        return self.cost if self.dual_value is None else self.dual_value


@dataclass(frozen=True)
class SinkhornParams:
    epsilon: float
    max_iters: int = 20000
    tol: float = 1e-9
    check_every: int = 10

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class Coupling:
    weights: np.ndarray
    a: np.ndarray
    b: np.ndarray
    f: np.ndarray | None = None
    g: np.ndarray | None = None
    iterations: int = 0
    violation: float = 0.0
    source_index: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]

    def cost(self, C) -> float:
        return float(np.sum(self.weights * C))


@dataclass(frozen=True)
class SpeedSchedule:
    kind: str = "reciprocal-horizon"
    horizon: float = 1.0
    gain_cap: float | None = None
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in ("reciprocal-horizon", "constant"):
            raise ValueError(f"unknown speed schedule {self.kind!r}")
        if self.gain_cap is None:
            object.__setattr__(self, "gain_cap", 50.0 / self.horizon)
        if self.gain_cap < 0 or self.gain < 0:
            raise ValueError("gains must be nonnegative")

    def gamma(self, t: float) -> float:
        if self.kind == "constant":
            return min(self.gain, self.gain_cap)
        if t >= self.horizon:
            raise ScheduleExpired(f"t={t:g} is past the schedule horizon {self.horizon:g}")
        return min(1.0 / (self.horizon - t), self.gain_cap)


# ---------------------------------------------------------------------------
# 1D exact map


def ot_map_1d(rho: DensityField, eta: DensityField) -> TransportMap:
    """Monotone rearrangement ``T = Q_eta o F_rho`` evaluated at cell centres."""
    if rho.grid.dim != 1 or eta.grid.dim != 1:
        raise UnsupportedDimensionError("ot_map_1d requires 1D densities")
    for r in (rho, eta):
        if abs(total_mass(r) - 1.0) > MASS_TOL:
            raise PreconditionError("ot_map_1d requires unit-mass densities")
    g = rho.grid
    Fr, Fe = cdf_1d(rho), cdf_1d(eta)
    x = g.axis_centers(0)
    T = quantile_1d(Fe, np.clip(Fr(x), 0.0, 1.0))
    phi = kantorovich_potential_1d(g, Fr, Fe)
    disp = x - T
    cost = float(np.sum(rho.values * disp**2) * g.spacing[0])
    return TransportMap(g, T, potential=phi, approximate=False, cost=cost)


def kantorovich_potential_1d(grid: Grid, Fr, Fe) -> np.ndarray:
    """Potential ``phi`` with ``phi' = x - T(x)`` at the cell centres (phi(first centre) = 0).

    Integrated with the trapezoid rule on half cells, using ``T`` at edges and centres.
    """
    e = grid.axis_edges(0)
    c = grid.axis_centers(0)
    pts = np.empty(2 * len(c) + 1)
    pts[0::2] = e
    pts[1::2] = c
    T = quantile_1d(Fe, np.clip(Fr(pts), 0.0, 1.0))
    d = pts - T
    seg = 0.5 * (d[1:] + d[:-1]) * np.diff(pts)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    phi = cum[1::2]
    return phi - phi[0]


# ---------------------------------------------------------------------------
# dense log-domain Sinkhorn


def _logmass(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), -np.inf)


def _eps_ladder(eps, scale):
    ladder = []
    e = max(scale, eps)
    while e > eps * 1.0001:
        ladder.append(e)
        e *= 0.5
    ladder.append(eps)
    return ladder


def sinkhorn(cost, a, b, params: SinkhornParams) -> Coupling:
    """Entropic OT coupling ``pi = diag(a e^{f/eps}) K diag(b e^{g/eps})``.

    Iterates in the log domain with epsilon-scaling; converged when the largest
    row-marginal violation (columns are exact after each sweep) is below ``tol``.
    """
    C = np.asarray(cost, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if C.shape != (a.size, b.size):
        raise ShapeError(f"cost {C.shape} does not match marginals ({a.size}, {b.size})")
    if not np.all(np.isfinite(C)):
        raise NumericalError("cost matrix must be finite")
    if np.any(a < 0) or np.any(b < 0):
        raise PreconditionError("marginals must be nonnegative")
    if abs(a.sum() - 1) > MASS_TOL or abs(b.sum() - 1) > MASS_TOL:
        raise PreconditionError("marginals must sum to one")
    la, lb = _logmass(a), _logmass(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    spread = float(np.max(C) - np.min(C)) if C.size else 0.0
    it = 0
    viol = math.inf
    for eps in _eps_ladder(params.epsilon, spread):
        final = eps == params.epsilon
        # coarse rungs only need a rough fit; settling each one keeps the fine rung short
        budget = params.max_iters - it if final else min(RUNG_ITERS, params.max_iters - it)
        target = params.tol if final else max(params.tol, RUNG_TOL)
        for k in range(budget):
            f = -eps * logsumexp(lb[None, :] + (g[None, :] - C) / eps, axis=1)
            g = -eps * logsumexp(la[:, None] + (f[:, None] - C) / eps, axis=0)
            it += 1
            if k % params.check_every == 0 or k == budget - 1:
                logP = la[:, None] + lb[None, :] + (f[:, None] + g[None, :] - C) / eps
                viol = float(np.max(np.abs(np.exp(logsumexp(logP, axis=1)) - a)))
                if not np.isfinite(viol):
                    raise NumericalError("Sinkhorn produced non-finite values")
                if viol <= target:
                    break
    eps = params.epsilon
    logP = la[:, None] + lb[None, :] + (f[:, None] + g[None, :] - C) / eps
    P = np.exp(logP)
    if not np.all(np.isfinite(P)):
        raise NumericalError("Sinkhorn produced non-finite values")
    viol = max(float(np.max(np.abs(P.sum(1) - a))), float(np.max(np.abs(P.sum(0) - b))))
    if viol > params.tol:
        raise NonConvergenceError(f"Sinkhorn did not converge in {it} iterations", viol)
    return Coupling(P, a, b, f=f, g=g, iterations=it, violation=viol)


def barycentric_map(pi: Coupling, target_points, source_grid: Grid) -> TransportMap:
    """``T(x_i) = sum_j pi_ij y_j / sum_j pi_ij``; rows without mass keep ``T(x) = x``."""
    Y = np.asarray(target_points, dtype=float).reshape(pi.cols, source_grid.dim)
    X = source_grid.points()
    idx = np.arange(source_grid.size) if pi.source_index is None else np.asarray(pi.source_index)
    if len(idx) != pi.rows:
        raise ShapeError("coupling rows do not match the source cells")
    T = X.copy()
    mass = pi.weights.sum(axis=1)
    has = mass > 0
    T[idx[has]] = (pi.weights[has] @ Y) / mass[has, None]
    return TransportMap(source_grid, T.reshape(source_grid.shape + (source_grid.dim,)), approximate=True)


# ---------------------------------------------------------------------------
# separable Sinkhorn on a grid


def _bbox(mask):
    sl = []
    for a in range(mask.ndim):
        other = tuple(i for i in range(mask.ndim) if i != a)
        hit = np.flatnonzero(mask.any(axis=other) if other else mask)
        sl.append(slice(int(hit[0]), int(hit[-1]) + 1))
    return tuple(sl)


def _lse(x, axis):
    """In-place log-sum-exp along ``axis`` (consumes ``x``); all ``-inf`` slices give ``-inf``."""
    m = np.max(x, axis=axis, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    x -= m
    np.exp(x, out=x)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(x, axis=axis)) + np.squeeze(m, axis)


class _SeparableKernel:
    """Log-domain application of ``exp(-|x - y|^2 / eps)`` between two sets of grid cells.

    Source cells are the full tensor product ``src_axes``; target cells are a
    tensor-product box ``dst_axes``.  ``apply(h)[i] = LSE_j(h_j - |x_i - y_j|^2/eps)``.
    """

    def __init__(self, src_axes, dst_axes, eps):
        self.eps = eps
        self.M = [-((s[:, None] - d[None, :]) ** 2) / eps for s, d in zip(src_axes, dst_axes)]

    def apply(self, h, extra=None):
        M = list(self.M)
        if extra is not None:
            axis, term = extra
            M[axis] = M[axis] + term
        if len(M) == 1:
            return _lse(M[0] + h[None, :], axis=1)
        M1, M2 = M
        tmp = _lse(h[:, None, :] + M2[None, :, :], axis=2)  # (k1, i2)
        return _lse(M1[:, :, None] + tmp[None, :, :], axis=1)  # (i1, i2)


@dataclass
class GridCoupling:
    """Entropic coupling between two densities on one grid, stored by its potentials."""

    grid: Grid
    eps: float
    src_slice: tuple
    dst_slice: tuple
    loga: np.ndarray
    logb: np.ndarray
    f: np.ndarray
    g: np.ndarray
    iterations: int = 0
    violation: float = 0.0
    extras: dict = field(default_factory=dict)

    def _axes(self, sl):
        return [self.grid.axis_centers(a)[sl[a]] for a in range(self.grid.dim)]

    def _target_kernel(self, src_axes):
        return _SeparableKernel(src_axes, self._axes(self.dst_slice), self.eps)

    def log_partition(self, src_axes=None, extra=None, weight=None):
        """``LSE_j(log b_j + g_j/eps [+ log weight_j] - c(x, y_j)/eps)`` on the source cells."""
        src_axes = src_axes or [self.grid.axis_centers(a) for a in range(self.grid.dim)]
        h = self.logb + self.g / self.eps
        if weight is not None:
            h = h + weight
        return self._target_kernel(src_axes).apply(h, extra)

    def dual_value(self) -> float:
        """Entropic OT value ``<f, a> + <g, b>``; its derivative in ``a`` is ``f``."""
        a = np.exp(self.loga)
        b = np.exp(self.logb)
        return float(np.sum(a * self.f) + np.sum(b * self.g))

    def potential(self) -> np.ndarray:
        """Source potential ``f`` extended to every grid cell by the entropic c-transform."""
        return -self.eps * self.log_partition()

    def barycentric(self) -> np.ndarray:
        g = self.grid
        base = self.log_partition()
        dst = self._axes(self.dst_slice)
        T = np.empty(g.shape + (g.dim,))
        for a in range(g.dim):
            lo = dst[a][0] - 1.0
            shape = [1] * g.dim
            shape[a] = -1
            logy = np.log(dst[a] - lo).reshape(shape)
            T[..., a] = np.exp(self.log_partition(weight=np.broadcast_to(logy, self.logb.shape)) - base) + lo
        return T

    def transport_cost(self) -> float:
        """``sum_ij pi_ij |x_i - y_j|^2`` of the current coupling."""
        g = self.grid
        src = self._axes(self.src_slice)
        dst = self._axes(self.dst_slice)
        logrow = self.loga + self.f / self.eps
        total = 0.0
        for a in range(g.dim):
            d2 = (src[a][:, None] - dst[a][None, :]) ** 2
            with np.errstate(divide="ignore"):
                term = np.log(d2)
            lp = self.log_partition(src_axes=src, extra=(a, term))
            total += float(np.sum(np.exp(logrow + lp)))
        return total


def sinkhorn_grid(rho: DensityField, eta: DensityField, params: SinkhornParams, warm: GridCoupling | None = None,
                  support_mass: float = SUPPORT_MASS) -> GridCoupling:
    """Log-domain Sinkhorn between grid densities, restricted to cells with mass above ``support_mass``."""
    if rho.grid != eta.grid:
        raise ShapeError("sinkhorn_grid requires densities on the same grid")
    grid = rho.grid
    vol = grid.cell_volume
    a = rho.values * vol
    b = eta.values * vol
    amask, bmask = a > support_mass, b > support_mass
    if not amask.any() or not bmask.any():
        raise PreconditionError("empty support")
    ssl, dsl = _bbox(amask), _bbox(bmask)
    a_s = np.where(amask, a, 0.0)[ssl]
    b_s = np.where(bmask, b, 0.0)[dsl]
    a_s = a_s / a_s.sum()
    b_s = b_s / b_s.sum()
    loga, logb = _logmass(a_s), _logmass(b_s)
    src = [grid.axis_centers(k)[ssl[k]] for k in range(grid.dim)]
    dst = [grid.axis_centers(k)[dsl[k]] for k in range(grid.dim)]
    eps_final = params.epsilon
    if warm is not None and warm.dst_slice == dsl and warm.grid == grid:
        g = warm.g.copy()
        ladder = [eps_final]
    else:
        g = np.zeros(b_s.shape)
        span = sum(float((max(s[-1], d[-1]) - min(s[0], d[0])) ** 2) for s, d in zip(src, dst))
        ladder = _eps_ladder(eps_final, span)
    it = 0
    viol = math.inf
    f = np.zeros(a_s.shape)
    for eps in ladder:
        K_st = _SeparableKernel(src, dst, eps)
        K_ts = _SeparableKernel(dst, src, eps)
        final = eps == eps_final
        budget = params.max_iters - it if final else 30
        for k in range(budget):
            f = -eps * K_st.apply(logb + g / eps)
            g = -eps * K_ts.apply(loga + f / eps)
            it += 1
            if final and (k % params.check_every == 0 or k == budget - 1):
                row = np.exp(loga + f / eps + K_st.apply(logb + g / eps))
                viol = float(np.max(np.abs(row - a_s)))
                if not np.isfinite(viol):
                    raise NumericalError("Sinkhorn produced non-finite values")
                if viol <= params.tol:
                    break
    if viol > params.tol:
        raise NonConvergenceError(f"grid Sinkhorn did not converge in {it} iterations", viol)
    return GridCoupling(grid, eps_final, ssl, dsl, loga, logb, f, g, iterations=it, violation=viol)


def ot_map_grid(rho: DensityField, eta: DensityField, params: SinkhornParams,
                warm: GridCoupling | None = None) -> TransportMap:
    """Entropic map on every grid cell plus the potential of ``1/2 W2^2``."""
    gc = sinkhorn_grid(rho, eta, params, warm=warm)
    T = gc.barycentric()
    phi = 0.5 * gc.potential()
    return TransportMap(rho.grid, T, potential=phi, approximate=True, cost=gc.transport_cost(), coupling=gc,
                        dual_value=gc.dual_value())


def transport_map(rho: DensityField, eta: DensityField, params: SinkhornParams | None = None,
                  warm: GridCoupling | None = None) -> TransportMap:
    if rho.grid.dim == 1:
        return ot_map_1d(rho, eta)
    if params is None:
        params = SinkhornParams(epsilon=2e-3, tol=1e-8)
    return ot_map_grid(rho, eta, params, warm=warm)


# ---------------------------------------------------------------------------
# nominal fields


def nominal_ot_field(T: TransportMap, schedule: SpeedSchedule, t: float) -> VelocityField:
    gamma = schedule.gamma(t)
    return VelocityField(T.grid, gamma * T.displacement())


def kl_gradient_flow_field(rho: DensityField, target: DensityField) -> VelocityField:
    """Descent field ``-grad(rho)/rho + grad(target)/target`` on the common support."""
    if rho.grid != target.grid:
        raise ShapeError("densities live on different grids")
    g = rho.grid
    sr = rho.values > ZERO_DENSITY
    st = target.values > ZERO_DENSITY
    if np.any(sr & ~st):
        raise SupportError("target support does not contain the density support")
    safe_r = np.where(sr, rho.values, 1.0)
    safe_t = np.where(st, target.values, 1.0)
    u = -gradient(rho.values, g) / safe_r[..., None] + gradient(target.values, g) / safe_t[..., None]
    return VelocityField(g, np.where(sr[..., None], u, 0.0), support=sr)


def kl_divergence(rho: DensityField, eta: DensityField) -> float:
    sr = rho.values > ZERO_DENSITY
    if np.any(sr & ~(eta.values > ZERO_DENSITY)):
        raise SupportError("KL divergence undefined: supp(rho) not inside supp(eta)")
    r, e = rho.values[sr], eta.values[sr]
    return float(np.sum(r * np.log(r / e)) * rho.grid.cell_volume)


# ---------------------------------------------------------------------------
# CSV export


def write_coupling_csv(path, pi: Coupling, threshold: float = 1e-15):
    with open(path, "w") as fh:
        fh.write("i,j,weight\n")
        I, J = np.nonzero(pi.weights >= threshold)
        for i, j in zip(I, J):
            fh.write(f"{i},{j},{pi.weights[i, j]!r}\n")
