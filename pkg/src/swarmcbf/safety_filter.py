"""Receding-horizon safety filter for grid densities.

Each step computes a nominal field, projects it onto the linearized barrier (and
optional Lyapunov) rows with the weighted QP, and advances the density with the
implicit upwind scheme.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .barriers import Barrier, ClassK, LinearizationContext, RowBlock, potential_row, upwind_guards
from .errors import InfeasibleQPError, PreconditionError, StartStateError
from .grid import (
    DensityField,
    Trajectory,
    VelocityField,
    advect_implicit_upwind,
    entropy,
    total_mass,
    w2_1d,
)
from .qp import INFEASIBLE, OPTIMAL, QpSolution, QpSpec, SolverSettings, solve_qp
from .transport import (
    GridCoupling,
    SinkhornParams,
    SpeedSchedule,
    TransportMap,
    kl_gradient_flow_field,
    nominal_ot_field,
    transport_map,
)

log = logging.getLogger(__name__)

START_SLACK = 1e-6


@dataclass(frozen=True)
class ClfSpec:
    """``V = W2^2(rho, target) / 2`` with the decay row ``dV/dt <= -alpha2(V)``."""

    target: DensityField
    alpha2: ClassK = field(default_factory=lambda: ClassK(1.0))
    lyapunov: str = "wasserstein-squared"


@dataclass(frozen=True)
class FilterConfig:
    dt: float
    steps: int
    target: DensityField
    gamma: SpeedSchedule = field(default_factory=SpeedSchedule)
    nominal: str = "ot"
    barriers: tuple = ()
    clf: ClfSpec | None = None
    solver: SolverSettings = field(default_factory=SolverSettings)
    sinkhorn: SinkhornParams | None = None
    filtered: bool = True
    guards: bool = True
    stop_w2: float | None = None
    snapshot_every: int = 1
    map_cache: bool | None = None
    t0: float = 0.0
    implicit_iters: int = 4

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.nominal not in ("ot", "kl", "zero"):
            raise ValueError(f"unknown nominal field {self.nominal!r}")
        object.__setattr__(self, "barriers", tuple(self.barriers))


@dataclass
class FilterState:
    """Mutable per-run cache: the last transport map and the motion since it was computed."""

    map: TransportMap | None = None
    drift: float = 0.0
    warm: GridCoupling | None = None
    recomputed: int = 0


def barrier_labels(barriers) -> list:
    seen = {}
    out = []
    for b in barriers:
        seen[b.kind] = seen.get(b.kind, 0) + 1
        out.append(f"H_{b.kind}" if seen[b.kind] == 1 else f"H_{b.kind}_{seen[b.kind]}")
    return out


def check_start(rho: DensityField, barriers, slack: float = START_SLACK):
    for b in barriers:
        v = b.margin(rho)
        if v < -slack:
            raise StartStateError(b.kind, v)


def assemble_qp(rho: DensityField, u_nom: VelocityField, barriers=(), clf: ClfSpec | None = None,
                ctx: LinearizationContext | None = None, guards: bool = True, check: bool = True,
                sinkhorn: SinkhornParams | None = None) -> QpSpec:
    """Weighted projection of ``u_nom`` onto the barrier rows (and CLF row), all in ``>=`` form."""
    if check:
        check_start(rho, barriers)
    ctx = ctx or LinearizationContext(rho, u_nom)
    g = rho.grid
    blocks = [b.rows(ctx) for b in barriers]
    if clf is not None:
        T = ctx.transport(clf.target, sinkhorn)
        V = 0.5 * T.objective
        blocks.append(RowBlock(potential_row(T, ctx), np.array([clf.alpha2(V)]), "clf"))
    A_parts = [blk.A for blk in blocks]
    if guards and blocks:
        A_parts_nz = sp.vstack(A_parts, format="csr") if A_parts else sp.csr_matrix((0, ctx.n))
        blocks.append(upwind_guards(A_parts_nz, ctx))
    meta, start = [], 0
    for blk in blocks:
        meta.append((blk.kind, start, start + len(blk)))
        start += len(blk)
    A = sp.vstack([blk.A for blk in blocks], format="csr") if blocks else sp.csr_matrix((0, ctx.n))
    b = np.concatenate([blk.b for blk in blocks]) if blocks else np.zeros(0)
    return QpSpec(np.full(ctx.n, g.cell_volume), u_nom.flat, A, b, meta)


def _stack_rows(barriers, ctx):
    blocks = [b.rows(ctx) for b in barriers]
    if not blocks:
        return sp.csr_matrix((0, ctx.n)), np.zeros(0)
    return sp.vstack([blk.A for blk in blocks], format="csr"), np.concatenate([blk.b for blk in blocks])


def _drop_clf(spec: QpSpec) -> QpSpec:
    keep = np.ones(spec.m, dtype=bool)
    for s in spec.block_slice("clf"):
        keep[s] = False
    idx = np.flatnonzero(keep)
    meta, start = [], 0
    for k, a, b in spec.blocks:
        if k == "clf":
            continue
        meta.append((k, start, start + (b - a)))
        start += b - a
    return QpSpec(spec.weights, spec.nominal, spec.A[idx], spec.b[idx], meta)


def nominal_field(rho: DensityField, config: FilterConfig, t: float, state: FilterState | None = None):
    """Nominal velocity and the transport map it came from (``None`` for non-OT nominals)."""
    g = rho.grid
    if config.nominal == "zero":
        return VelocityField.zeros(g), None
    if config.nominal == "kl":
        return kl_gradient_flow_field(rho, config.target), None
    state = state if state is not None else FilterState()
    cache = config.map_cache if config.map_cache is not None else g.dim > 1
    dx = min(g.spacing)
    if state.map is None or not cache or state.drift >= dx:
        state.map = transport_map(rho, config.target, config.sinkhorn, warm=state.warm)
        if isinstance(state.map.coupling, GridCoupling):
            state.warm = state.map.coupling
        state.drift = 0.0
        state.recomputed += 1
    return nominal_ot_field(state.map, config.gamma, t), state.map


def w2_to_target(rho: DensityField, target: DensityField, T: TransportMap | None = None,
                 sinkhorn: SinkhornParams | None = None) -> float:
    """Exact in 1D; in 2D the transport cost of the (fresh) entropic map."""
    if rho.grid.dim == 1:
        return w2_1d(rho, target)
    if T is None:
        T = transport_map(rho, target, sinkhorn)
    return T.w2


def state_diagnostics(rho, config: FilterConfig, t, T: TransportMap | None = None) -> dict:
    """Per-state record.  In 2D ``V``/``w2`` come from ``T`` and are NaN when no fresh map is given."""
    d = {"t": t, "mass": total_mass(rho), "entropy": entropy(rho)}
    if rho.grid.dim == 1:
        w2 = w2_1d(rho, config.target)
        V = 0.5 * w2 * w2
    elif T is not None:
        w2, V = T.w2, 0.5 * T.objective
    else:
        w2 = V = math.nan
    d["V"] = V
    d["w2_to_target"] = w2
    for lab, b in zip(barrier_labels(config.barriers), config.barriers):
        d[lab] = b.margin(rho)
    return d


def filter_step(rho: DensityField, config: FilterConfig, t: float, state: FilterState | None = None,
                check: bool = True):
    """One receding-horizon step; returns ``(u, rho_next, diagnostics)``."""
    state = state if state is not None else FilterState()
    g = rho.grid
    u_nom, T = nominal_field(rho, config, t, state)
    fresh = T if (T is not None and state.drift == 0.0) else None
    diag = state_diagnostics(rho, config, t, fresh)
    fallback = False
    rho_next = None
    if config.filtered and (config.barriers or config.clf is not None):
        if check:
            check_start(rho, config.barriers)
        maps = {id(config.target): T} if fresh is not None else {}
        donor = rho
        iters = 0
        # Rows use donor densities from the predicted implicit update; iterate to a fixed point
        # so the realized step satisfies the discrete decay H+ >= (1 - lambda dt) H for linear H.
        for j in range(max(1, config.implicit_iters)):
            ctx = LinearizationContext(rho, u_nom, maps, donor=donor)
            spec = assemble_qp(rho, u_nom, config.barriers, config.clf if not fallback else None, ctx,
                               config.guards, False, config.sinkhorn)
            sol = solve_qp(spec, config.solver)
            if sol.status == INFEASIBLE and config.clf is not None and not fallback:
                log.warning("t=%.4f: QP infeasible with the Lyapunov row; retrying without it", t)
                fallback = True
                spec = _drop_clf(spec)
                sol = solve_qp(spec, config.solver)
            if sol.status == INFEASIBLE:
                raise InfeasibleQPError(f"safety QP infeasible at t={t:.6g}",
                                        snapshot={"t": t, "rho": rho, "u_nom": u_nom}, solution=sol)
            iters += sol.iterations
            u = VelocityField.from_vector(g, sol.U)
            rho_next = advect_implicit_upwind(rho, u, config.dt)
            if not np.any(sol.multipliers > 0):
                break
            check_ctx = LinearizationContext(rho, u_nom, maps, donor=rho_next)
            A, b = _stack_rows(config.barriers, check_ctx)
            if A.shape[0] == 0 or np.max(b - A @ sol.U) <= config.solver.feas_tol * max(1.0, np.max(np.abs(b))):
                break
            donor = rho_next
        if sol.status != OPTIMAL:
            log.warning("t=%.4f: QP stopped with status %s (violation %.2e)", t, sol.status, sol.primal_residual)
        status = sol.status
        dev = math.sqrt(2.0 * spec.objective(sol.U))
    else:
        if config.filtered and check:
            check_start(rho, config.barriers)
        u, status, iters, dev = u_nom, "unfiltered", 0, 0.0
    if rho_next is None:
        rho_next = advect_implicit_upwind(rho, u, config.dt)
    speed = math.sqrt(float(np.sum(rho.flat[:, None] * u.values.reshape(-1, g.dim) ** 2) * g.cell_volume))
    state.drift += speed * config.dt
    diag.update(u_dev_norm=dev, qp_status=status + ("+fallback" if fallback else ""), qp_iters=iters)
    return u, rho_next, diag


def run_scenario(rho0: DensityField, config: FilterConfig, state: FilterState | None = None,
                 progress=None) -> Trajectory:
    """Iterate :func:`filter_step`; stop early once ``W2`` to the target is below ``stop_w2``.

    ``traj.diagnostics`` holds one record per visited state (the last one has no
    control attached); snapshots are kept every ``snapshot_every`` steps and at the end.
    """
    if rho0.grid != config.target.grid:
        raise PreconditionError("initial and target densities must share a grid")
    state = state if state is not None else FilterState()
    if config.filtered:
        check_start(rho0, config.barriers)
    stop = config.stop_w2 if config.stop_w2 is not None else 5 * min(rho0.grid.spacing)
    traj = Trajectory()
    rho, t = rho0, config.t0
    traj.append(t, rho)
    k = 0
    while k < config.steps:
        d = None
        if config.nominal == "ot" and rho.grid.dim == 1:
            d = w2_1d(rho, config.target)
        if d is not None and d <= stop:
            break
        u, rho_next, diag = filter_step(rho, config, t, state, check=False)
        traj.diagnostics.append(diag)
        if progress is not None:
            progress(k, diag)
        rho = rho_next
        k += 1
        t = config.t0 + k * config.dt
        if k % config.snapshot_every == 0:
            traj.append(t, rho)
    if traj.times[-1] != t:
        traj.append(t, rho)
    T = None
    if rho.grid.dim > 1 and config.nominal == "ot":
        T = transport_map(rho, config.target, config.sinkhorn, warm=state.warm)
    final = state_diagnostics(rho, config, t, T)
    final.update(u_dev_norm=math.nan, qp_status="final", qp_iters=0)
    traj.diagnostics.append(final)
    traj.final = rho
    traj.steps = k
    return traj


def pointwise_cap_field(rho: DensityField, u_nom: VelocityField, rho_max=None, rho_min=None,
                        alpha1: ClassK = ClassK(), alpha2: ClassK = ClassK(), convention: str = "lagrangian",
                        solver: SolverSettings | None = None) -> VelocityField:
    """Continuum limit of the per-agent cap/floor filter, solved as one block-separable QP.

    Each cell keeps ``lo <= u . grad(rho) <= hi`` with the same interval as the agents use;
    cells whose interval is empty drop the floor, and flat cells keep their nominal.
    """
    from .grid import gradient
    from .microscopic import cap_interval

    g = rho.grid
    n = g.size
    grad = gradient(rho.values, g).reshape(n, g.dim)
    lo, hi = cap_interval(rho.flat, rho_max, rho_min, alpha1, alpha2, convention)
    lo, hi = lo.copy(), hi.copy()
    gg = np.sum(grad ** 2, axis=1)
    bad = lo > hi
    if convention == "lagrangian":
        lo[bad] = -np.inf
    else:
        hi[bad] = np.inf
    keep = gg > 0
    rows, rhs = [], []
    cols = np.arange(n * g.dim).reshape(n, g.dim)
    for bound, sign in ((lo, 1.0), (hi, -1.0)):
        sel = np.flatnonzero(keep & np.isfinite(bound))
        r = np.repeat(np.arange(sel.size), g.dim)
        A = sp.csr_matrix((sign * grad[sel].ravel(), (r, cols[sel].ravel())), shape=(sel.size, n * g.dim))
        rows.append(A)
        rhs.append(sign * bound[sel])
    A = sp.vstack(rows, format="csr")
    b = np.concatenate(rhs)
    spec = QpSpec(np.full(n * g.dim, g.cell_volume), u_nom.flat, A, b, [("cap", 0, A.shape[0])])
    sol = solve_qp(spec, solver or SolverSettings())
    if sol.status == INFEASIBLE:
        raise InfeasibleQPError("pointwise cap QP infeasible", snapshot={"rho": rho}, solution=sol)
    return VelocityField.from_vector(g, sol.U)
