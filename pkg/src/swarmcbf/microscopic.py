"""Agent-level counterpart of the density filter.

Agents estimate the density with a truncated Gaussian kernel from neighbours within
``2r``, solve decoupled per-agent QPs for pointwise caps and floors, and run a
slack-consensus scheme for a globally coupled entropy bound.  Per-agent routines
read positions only through a store indexed by the agent's neighbour set, so the
locality claims can be audited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree
from scipy.special import gammainc

from .barriers import ClassK
from .errors import LocalInfeasibilityError, LocalityViolation, PreconditionError, ShapeError
from .grid import DensityField, Grid

# relative slack on the "x inside B(x_i, r)" precondition of local queries
LOCAL_TOL = 1e-12


# ---------------------------------------------------------------------------
# kernel


def kernel_constant(r: float, dim: int) -> float:
    """Mass of ``exp(-|y|^2 / 2r^2)`` over the ball of radius ``r`` in ``dim`` dimensions."""
    if not r > 0:
        raise PreconditionError("kernel radius must be positive")
    return float((2.0 * math.pi * r * r) ** (dim / 2.0) * gammainc(dim / 2.0, 0.5))


def gradient_moment(dim: int) -> float:
    """``kappa`` with ``E[grad rho_hat] -> kappa grad rho`` when the truncation jump is left out.

    Equals ``(1/(d r^2)) int |z|^2 K_r(z) dz``; it does not depend on ``r``.
    """
    return float(gammainc(dim / 2.0 + 1.0, 0.5) / gammainc(dim / 2.0, 0.5))


def kernel_value(y, r: float):
    """Truncated Gaussian kernel; ``y`` has shape ``(..., dim)``.  Closed ball convention."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y[None]
    dim = y.shape[-1]
    q = np.sum(y * y, axis=-1)
    out = np.where(q <= r * r, np.exp(-q / (2.0 * r * r)), 0.0) / kernel_constant(r, dim)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# swarm containers


@dataclass(frozen=True)
class Swarm:
    positions: np.ndarray
    r: float
    bounds: np.ndarray | None = None

    def __post_init__(self):
        p = np.array(self.positions, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise ShapeError("positions must be an (N, dim) array with N >= 1")
        if not self.r > 0:
            raise PreconditionError("interaction radius must be positive")
        p.setflags(write=False)
        object.__setattr__(self, "positions", p)
        if self.bounds is not None:
            b = np.array(self.bounds, dtype=float).reshape(p.shape[1], 2)
            if np.any(p < b[:, 0] - 1e-12) or np.any(p > b[:, 1] + 1e-12):
                raise PreconditionError("agent positions must lie inside the domain")
            b.setflags(write=False)
            object.__setattr__(self, "bounds", b)

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def moved(self, positions) -> "Swarm":
        return replace(self, positions=positions)


class PositionStore:
    """Read access to agent positions by index array."""

    def __init__(self, positions):
        self._p = np.asarray(positions, dtype=float)

    def __getitem__(self, idx):
        return self._p[idx]

    def __len__(self):
        return self._p.shape[0]


class AuditedStore(PositionStore):
    """Position store that records every index read, for locality checks."""

    def __init__(self, positions):
        super().__init__(positions)
        self.accessed = set()

    def __getitem__(self, idx):
        self.accessed.update(np.atleast_1d(np.arange(len(self))[idx]).tolist())
        return super().__getitem__(idx)

    def reset(self):
        self.accessed.clear()


@dataclass(frozen=True)
class NeighborGraph:
    """Closed ``2r`` neighbourhoods (self included) plus the directed edge list without self loops."""

    neighbors: tuple
    src: np.ndarray
    dst: np.ndarray

    @property
    def N(self) -> int:
        return len(self.neighbors)

    def degree(self) -> np.ndarray:
        return np.array([len(n) - 1 for n in self.neighbors])

    def is_symmetric(self) -> bool:
        pairs = set(zip(self.src.tolist(), self.dst.tolist()))
        return all((j, i) in pairs for i, j in pairs)


def build_neighbor_graph(swarm: Swarm, radius: float | None = None) -> NeighborGraph:
    radius = 2.0 * swarm.r if radius is None else radius
    tree = cKDTree(swarm.positions)
    # the tree compares rounded distances; widen the query and re-check with the oracle's formula
    pairs = tree.query_pairs(radius * (1 + 1e-9), output_type="ndarray")
    if pairs.size:
        d2 = np.sum((swarm.positions[pairs[:, 0]] - swarm.positions[pairs[:, 1]]) ** 2, axis=1)
        pairs = pairs[d2 <= radius * radius]
    src = np.concatenate([pairs[:, 0], pairs[:, 1]]) if pairs.size else np.zeros(0, dtype=int)
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]]) if pairs.size else np.zeros(0, dtype=int)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    split = np.searchsorted(src, np.arange(swarm.N + 1))
    nbrs = []
    for i in range(swarm.N):
        nb = np.sort(np.append(dst[split[i]:split[i + 1]], i))
        nb.setflags(write=False)
        nbrs.append(nb)
    return NeighborGraph(tuple(nbrs), src, dst)


def brute_force_neighbors(positions, radius) -> list:
    p = np.asarray(positions, dtype=float)
    d2 = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    return [np.flatnonzero(row <= radius * radius) for row in d2]


# ---------------------------------------------------------------------------
# density estimates


def _store(swarm, store):
    return store if store is not None else PositionStore(swarm.positions)


def _check_local(x, xi, r):
    if np.sum((x - xi) ** 2) > r * r * (1 + LOCAL_TOL):
        raise LocalityViolation(f"query point is outside B(x_i, r) with r={r:g}")


def kde_at(x, swarm: Swarm, which="all", graph: NeighborGraph | None = None, store=None) -> float:
    """Kernel estimate at ``x`` from all agents, or (``which=i``) from the neighbours of agent ``i``.

    Both forms sum the same nonzero terms with an exactly rounded sum, so they agree bitwise.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    store = _store(swarm, store)
    if isinstance(which, str):
        if which != "all":
            raise ValueError("which must be 'all' or an agent index")
        idx = np.arange(swarm.N)
    else:
        i = int(which)
        graph = graph or build_neighbor_graph(swarm)
        _check_local(x, store[i], swarm.r)
        idx = graph.neighbors[i]
    k = kernel_value(x[None, :] - store[idx], swarm.r)
    return math.fsum(np.atleast_1d(k).tolist()) / swarm.N


def kde_gradient(x, swarm: Swarm, i: int, graph: NeighborGraph | None = None, store=None) -> np.ndarray:
    """Derivative of the Gaussian factor; the jump at the truncation radius is ignored."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    store = _store(swarm, store)
    graph = graph or build_neighbor_graph(swarm)
    _check_local(x, store[i], swarm.r)
    d = x[None, :] - store[graph.neighbors[i]]
    k = np.atleast_1d(kernel_value(d, swarm.r))
    terms = -k[:, None] * d / (swarm.r * swarm.r)
    return np.array([math.fsum(terms[:, a].tolist()) for a in range(swarm.dim)]) / swarm.N


def kde_grid(points, swarm: Swarm) -> np.ndarray:
    """Global estimate at many points (tree query, vectorized)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tree = cKDTree(swarm.positions)
    sdm = cKDTree(pts).sparse_distance_matrix(tree, swarm.r, output_type="ndarray")
    out = np.zeros(pts.shape[0])
    if sdm.size:
        d = pts[sdm["i"]] - swarm.positions[sdm["j"]]
        out = np.bincount(sdm["i"], weights=kernel_value(d, swarm.r), minlength=pts.shape[0])
    return out / swarm.N


@dataclass(frozen=True)
class AgentDensity:
    """Per-agent ``rho_hat_i(x_i)`` and its gradient, computed from ``2r`` neighbours."""

    rho: np.ndarray
    grad: np.ndarray


def agent_densities(swarm: Swarm, graph: NeighborGraph) -> AgentDensity:
    """Vectorized ``kde_at``/``kde_gradient`` at every agent's own position."""
    p = swarm.positions
    d = p[graph.src] - p[graph.dst]
    k = np.atleast_1d(kernel_value(d, swarm.r)) if d.size else np.zeros(0)
    k0 = kernel_value(np.zeros(swarm.dim), swarm.r)
    rho = (k0 + np.bincount(graph.src, weights=k, minlength=swarm.N)) / swarm.N
    grad = np.zeros((swarm.N, swarm.dim))
    if d.size:
        w = -k[:, None] * d / (swarm.r * swarm.r)
        for a in range(swarm.dim):
            grad[:, a] = np.bincount(graph.src, weights=w[:, a], minlength=swarm.N)
    return AgentDensity(rho, grad / swarm.N)


# ---------------------------------------------------------------------------
# Voronoi cells intersected with r-balls


@dataclass(frozen=True)
class LocalCell:
    agent: int
    points: np.ndarray
    weight: float


def _lattice_anchor(swarm: Swarm) -> np.ndarray:
    return swarm.bounds[:, 0] if swarm.bounds is not None else np.zeros(swarm.dim)


def _check_hq(swarm, hq):
    if hq is None:
        hq = swarm.r / 5.0
    if not 0 < hq <= swarm.r / 5.0 * (1 + 1e-12):
        raise PreconditionError("quadrature spacing must satisfy 0 < h_q <= r/5")
    return hq


def _ball_lattice(center, r, hq, anchor, bounds):
    lo = np.floor((center - r - anchor) / hq - 0.5).astype(int)
    hi = np.ceil((center + r - anchor) / hq - 0.5).astype(int)
    axes = [anchor[a] + hq * (np.arange(lo[a], hi[a] + 1) + 0.5) for a in range(len(center))]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(center))
    keep = np.sum((pts - center) ** 2, axis=1) <= r * r
    if bounds is not None:
        keep &= np.all((pts >= bounds[:, 0]) & (pts <= bounds[:, 1]), axis=1)
    return pts[keep]


def _owner(pts, cand_pos, cand_idx):
    """Nearest candidate per point, ties to the lowest agent index (``cand_idx`` sorted)."""
    d2 = np.zeros((pts.shape[0], cand_pos.shape[0]))
    for a in range(pts.shape[1]):
        d2 += (pts[:, a:a + 1] - cand_pos[None, :, a]) ** 2
    return cand_idx[np.argmin(d2, axis=1)]


def local_cell(i: int, swarm: Swarm, hq: float | None = None, graph: NeighborGraph | None = None,
               store=None) -> LocalCell:
    """Lattice points within ``r`` of agent ``i`` whose nearest agent is ``i``; reads only ``N_i``."""
    hq = _check_hq(swarm, hq)
    store = _store(swarm, store)
    graph = graph or build_neighbor_graph(swarm)
    nb = graph.neighbors[i]
    pos = store[nb]
    xi = pos[np.searchsorted(nb, i)]
    pts = _ball_lattice(xi, swarm.r, hq, _lattice_anchor(swarm), swarm.bounds)
    mine = pts[_owner(pts, pos, nb) == i] if pts.size else pts
    return LocalCell(i, mine, mine.shape[0] * hq ** swarm.dim)


def cell_weights(swarm: Swarm, hq: float | None = None, k: int = 6) -> np.ndarray:
    """Vectorized ``local_cell(...).weight`` for every agent."""
    hq = _check_hq(swarm, hq)
    anchor = _lattice_anchor(swarm)
    p = swarm.positions
    lo = p.min(axis=0) - swarm.r
    hi = p.max(axis=0) + swarm.r
    if swarm.bounds is not None:
        lo = np.maximum(lo, swarm.bounds[:, 0])
        hi = np.minimum(hi, swarm.bounds[:, 1])
    axes = []
    for a in range(swarm.dim):
        n0 = int(np.floor((lo[a] - anchor[a]) / hq - 0.5))
        n1 = int(np.ceil((hi[a] - anchor[a]) / hq - 0.5))
        ax = anchor[a] + hq * (np.arange(n0, n1 + 1) + 0.5)
        if swarm.bounds is not None:
            ax = ax[(ax >= swarm.bounds[a, 0]) & (ax <= swarm.bounds[a, 1])]
        axes.append(ax)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, swarm.dim)
    k = min(k, swarm.N)
    dist, idx = cKDTree(p).query(pts, k=k, distance_upper_bound=swarm.r * (1 + 1e-9))
    idx = np.asarray(idx).reshape(pts.shape[0], k)
    valid = idx < swarm.N
    safe = np.where(valid, idx, 0)
    d2 = np.zeros(idx.shape)
    for a in range(swarm.dim):
        d2 += (pts[:, a:a + 1] - p[safe, a]) ** 2
    valid &= d2 <= swarm.r * swarm.r
    d2 = np.where(valid, d2, np.inf)
    # lowest index among exact minimizers
    best = d2.min(axis=1, keepdims=True)
    cand = np.where((d2 == best) & valid, safe, swarm.N)
    owner = cand.min(axis=1)
    owner = owner[owner < swarm.N]
    return np.bincount(owner, minlength=swarm.N) * hq ** swarm.dim


# ---------------------------------------------------------------------------
# decoupled cap/floor QP


def _bound_at(bound, x):
    if bound is None:
        return None
    if callable(bound):
        return np.asarray(bound(x), dtype=float)
    return np.asarray(bound, dtype=float)


def cap_interval(rho_hat, rho_max=None, rho_min=None, alpha1: ClassK = ClassK(), alpha2: ClassK = ClassK(),
                 convention: str = "lagrangian"):
    """Admissible interval ``[lo, hi]`` for ``u . grad(rho_hat)``.

    ``lagrangian`` bounds the density seen along the agent's own path,
    ``d/dt rho_hat(x_i(t)) = u . grad``; ``eulerian`` uses the frozen-field rate
    ``-u . grad`` at a fixed point, which is the literal per-agent form.
    """
    rho_hat = np.asarray(rho_hat, dtype=float)
    lo = np.full(rho_hat.shape, -np.inf)
    hi = np.full(rho_hat.shape, np.inf)
    if convention == "lagrangian":
        if rho_max is not None:
            hi = alpha1(rho_max - rho_hat)
        if rho_min is not None:
            lo = alpha2(rho_min - rho_hat)
    elif convention == "eulerian":
        if rho_max is not None:
            lo = alpha1(rho_hat - rho_max)
        if rho_min is not None:
            hi = alpha2(rho_hat - rho_min)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return np.broadcast_to(lo, rho_hat.shape).astype(float), np.broadcast_to(hi, rho_hat.shape).astype(float)


def project_interval(u_nom, grad, lo, hi):
    """Closed-form minimizer of ``|u - u_nom|^2`` subject to ``lo <= u . grad <= hi`` (per row)."""
    u_nom = np.atleast_2d(np.asarray(u_nom, dtype=float))
    g = np.atleast_2d(np.asarray(grad, dtype=float))
    lo = np.atleast_1d(lo)
    hi = np.atleast_1d(hi)
    if np.any(lo > hi):
        k = int(np.argmax(lo - hi))
        raise LocalInfeasibilityError(float(lo[k]), float(hi[k]))
    s0 = np.sum(u_nom * g, axis=1)
    gg = np.sum(g * g, axis=1)
    flat = gg == 0
    if np.any(flat & ((lo > 0) | (hi < 0))):
        k = int(np.flatnonzero(flat & ((lo > 0) | (hi < 0)))[0])
        raise LocalInfeasibilityError(float(lo[k]), float(hi[k]))
    s = np.clip(s0, lo, hi)
    step = np.where(flat, 0.0, (s - s0) / np.where(flat, 1.0, gg))
    return u_nom + step[:, None] * g


def local_cap_qp(i: int, swarm: Swarm, u_nom_i, rho_max=None, rho_min=None, alpha1: ClassK = ClassK(),
                 alpha2: ClassK = ClassK(), graph: NeighborGraph | None = None, store=None,
                 convention: str = "lagrangian") -> np.ndarray:
    """Agent ``i``'s cap/floor-filtered velocity from its own neighbourhood only."""
    store = _store(swarm, store)
    graph = graph or build_neighbor_graph(swarm)
    xi = store[np.array([i])][0]
    rho = kde_at(xi, swarm, i, graph, store)
    g = kde_gradient(xi, swarm, i, graph, store)
    lo, hi = cap_interval(rho, _bound_at(rho_max, xi), _bound_at(rho_min, xi), alpha1, alpha2, convention)
    return project_interval(u_nom_i, g, lo, hi)[0]


@dataclass(frozen=True)
class CapResult:
    velocities: np.ndarray
    active: np.ndarray
    relaxed: np.ndarray
    stuck: np.ndarray


def swarm_cap_filter(swarm: Swarm, dens: AgentDensity, u_nom, rho_max=None, rho_min=None,
                     alpha1: ClassK = ClassK(), alpha2: ClassK = ClassK(), convention: str = "lagrangian",
                     max_correction: float | None = None) -> CapResult:
    """All agents' decoupled QPs.  An empty interval drops the floor first; a cap that no velocity
    can meet (flat estimate) leaves the nominal in place and is reported in ``stuck``.

    ``max_correction`` bounds ``|v - u_nom|``: near flat spots of the estimate the exact
    correction ``alpha (rho - rho_max) / |grad|`` is unbounded, far beyond the kernel
    scale on which the linearization means anything.
    """
    u_nom = np.asarray(u_nom, dtype=float).reshape(swarm.N, swarm.dim)
    p = swarm.positions
    lo, hi = cap_interval(dens.rho, _bound_at(rho_max, p), _bound_at(rho_min, p), alpha1, alpha2, convention)
    lo, hi = lo.copy(), hi.copy()
    gg = np.sum(dens.grad ** 2, axis=1)
    bad = lambda: (lo > hi) | ((gg == 0) & ((lo > 0) | (hi < 0)))  # noqa: E731
    relaxed = bad()
    if convention == "lagrangian":
        lo[relaxed] = -np.inf
    else:
        hi[relaxed] = np.inf
    stuck = bad()
    lo[stuck], hi[stuck] = -np.inf, np.inf
    v = project_interval(u_nom, dens.grad, lo, hi)
    if max_correction is not None:
        dv = v - u_nom
        n = np.linalg.norm(dv, axis=1)
        big = n > max_correction
        v[big] = u_nom[big] + dv[big] * (max_correction / n[big])[:, None]
    active = np.any(v != u_nom, axis=1)
    return CapResult(v, active, relaxed, stuck)


# ---------------------------------------------------------------------------
# consensus-slack entropy bound


@dataclass
class ConsensusState:
    y: np.ndarray
    lam: np.ndarray
    k: float = 1.0
    dtC: float = 0.1

    @classmethod
    def zeros(cls, N, k=1.0, dtC=0.1):
        return cls(np.zeros(N), np.zeros(N), k, dtC)


def laplacian_apply(graph: NeighborGraph, v) -> np.ndarray:
    """``sum_{j in N_i} (v_i - v_j)`` for every agent."""
    v = np.asarray(v, dtype=float)
    return np.bincount(graph.src, weights=v[graph.src] - v[graph.dst], minlength=graph.N)


def consensus_steps(graph: NeighborGraph, cc) -> np.ndarray:
    """Per-agent slack step ``1 / sum_j |L_ij| D_j 2 deg_j`` with ``D_j = 1/|c_j|^2``.

    ``lambda_i`` moves by ``-S_i / |c_i|^2`` when agent ``i`` binds, so the slack
    iteration has Jacobian ``I - H L D L``; this choice bounds its spectrum by
    Gershgorin and uses only two-hop neighbour data.
    """
    cc = np.asarray(cc, dtype=float)
    D = np.where(cc > 0, 1.0 / np.where(cc > 0, cc, 1.0), 0.0)
    deg = np.bincount(graph.src, minlength=graph.N).astype(float)
    load = D * 2.0 * deg
    tot = deg * load + np.bincount(graph.src, weights=load[graph.dst], minlength=graph.N)
    return np.where(tot > 0, 1.0 / np.where(tot > 0, tot, 1.0), 0.0)


def telescoping_sum(graph: NeighborGraph, y) -> float:
    return math.fsum(laplacian_apply(graph, y).tolist())


def agent_entropy(rho_hat, w) -> np.ndarray:
    """``-rho log rho * w`` per agent; the estimated swarm entropy is its sum."""
    rho_hat = np.asarray(rho_hat, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(rho_hat > 0, -rho_hat * np.log(np.where(rho_hat > 0, rho_hat, 1.0)), 0.0)
    return val * np.asarray(w, dtype=float)


@dataclass(frozen=True)
class EntropyRows:
    """Per-agent rows ``c_i . u >= b_i`` before the slack term."""

    c: np.ndarray
    base: np.ndarray
    entropy: float


def entropy_rows(dens: AgentDensity, w, epsilon: float, alpha: ClassK, N: int,
                 grad_scale: float = 1.0) -> EntropyRows:
    """Share ``dH/dt = -sum grad(rho_i) . u_i w_i >= -alpha(H - eps)`` into ``N`` local rows.

    ``grad_scale`` divides the kernel gradient (``gradient_moment(dim)`` makes it a
    consistent estimate of ``grad rho``).
    """
    Hi = agent_entropy(dens.rho, w)
    c = -dens.grad * (np.asarray(w, dtype=float) / grad_scale)[:, None]
    base = -alpha(Hi - epsilon / N)
    return EntropyRows(c, np.asarray(base, dtype=float), math.fsum(Hi.tolist()))


@dataclass(frozen=True)
class RoundReport:
    sum_telescope: float
    max_lambda_spread: float
    entropy_hat: float
    global_margin: float
    infeasible: int


def distributed_round(graph: NeighborGraph, rows: EntropyRows, state: ConsensusState, u_nom,
                      alpha: ClassK, epsilon: float):
    """One synchronous superstep: local halfspace projections, then the slack exchange.

    Returns ``(velocities, new_state, report)``.  ``report.global_margin`` is the
    summed-row residual ``sum c_i.u_i + alpha(H_hat - eps)``, nonnegative for any slacks.
    """
    u_nom = np.asarray(u_nom, dtype=float)
    S = laplacian_apply(graph, state.y)
    b = rows.base - S
    s0 = np.sum(rows.c * u_nom, axis=1)
    cc = np.sum(rows.c * rows.c, axis=1)
    short = b - s0
    flat = cc == 0
    lam = np.where((short > 0) & ~flat, short / np.where(flat, 1.0, cc), 0.0)
    v = u_nom + lam[:, None] * rows.c
    # multipliers move slack toward the agents whose rows bind hardest, with a per-agent step
    y = state.y + state.dtC * state.k * consensus_steps(graph, cc) * laplacian_apply(graph, lam)
    new = ConsensusState(y, lam, state.k, state.dtC)
    spread = float(np.max(np.abs(lam[graph.src] - lam[graph.dst]))) if graph.src.size else 0.0
    lhs = math.fsum(np.sum(rows.c * v, axis=1).tolist())
    margin = lhs + float(alpha(rows.entropy - epsilon))
    report = RoundReport(telescoping_sum(graph, state.y), spread, rows.entropy, margin,
                         int(np.sum(flat & (short > 0))))
    return v, new, report


# ---------------------------------------------------------------------------
# motion and sampling


def integrate_agents(swarm: Swarm, velocities, dt: float, return_velocity: bool = False):
    """Forward Euler, clamped to the domain; clamped components have their velocity zeroed."""
    if not dt > 0:
        raise PreconditionError("dt must be positive")
    v = np.array(velocities, dtype=float).reshape(swarm.N, swarm.dim)
    x = swarm.positions + dt * v
    if swarm.bounds is not None:
        lo, hi = swarm.bounds[:, 0], swarm.bounds[:, 1]
        clamped = (x < lo) | (x > hi)
        x = np.clip(x, lo, hi)
        v[clamped] = 0.0
    out = swarm.moved(x)
    return (out, v) if return_velocity else out


def sample_swarm(rho: DensityField, N: int, r: float, rng: np.random.Generator) -> Swarm:
    """``N`` i.i.d. agents from a grid density (cell by mass, then uniform inside the cell)."""
    g = rho.grid
    p = rho.values.ravel() / rho.values.sum()
    cells = rng.choice(p.size, size=N, p=p)
    idx = np.stack(np.unravel_index(cells, g.shape), axis=1)
    lo = np.asarray(g.origin, dtype=float)
    h = np.asarray(g.spacing, dtype=float)
    pos = lo + (idx + rng.random((N, g.dim))) * h
    return Swarm(pos, r, g.bounds)


def interpolate(grid: Grid, values, points) -> np.ndarray:
    """Multilinear interpolation of a cell-centred field (scalar or vector) at points."""
    axes = [grid.axis_centers(a) for a in range(grid.dim)]
    f = RegularGridInterpolator(axes, np.asarray(values, dtype=float), bounds_error=False, fill_value=None)
    return f(np.atleast_2d(points))


# ---------------------------------------------------------------------------
# consistency study


@dataclass
class ConsistencyRow:
    N: int
    r: float
    kde_error: list = field(default_factory=list)
    deviation: list = field(default_factory=list)

    @property
    def kde_mean(self):
        return float(np.mean(self.kde_error))

    @property
    def dev_mean(self):
        return float(np.mean(self.deviation))

    @property
    def kde_noise(self):
        return float(np.std(self.kde_error))

    @property
    def dev_noise(self):
        return float(np.std(self.deviation))


def kde_error(rho: DensityField, swarm: Swarm, support_frac: float = 1e-3) -> float:
    """Mean absolute KDE error over grid cells where ``rho`` exceeds ``support_frac`` of its peak."""
    g = rho.grid
    mask = rho.values > support_frac * rho.values.max()
    pts = g.centers()[mask]
    return float(np.mean(np.abs(kde_grid(pts, swarm) - rho.values[mask])))


def macroscopic_reference(rho: DensityField, u_nom, rho_max=None, rho_min=None, alpha1: ClassK = ClassK(),
                          alpha2: ClassK = ClassK(), convention: str = "lagrangian", solver=None):
    """Continuum limit of :func:`swarm_cap_filter` for the grid density ``rho``.

    The agents' gradient tends to ``kappa grad rho``, so their halfspace is the
    continuum one with gains divided by ``kappa``.  Returns a grid velocity array.
    """
    from .grid import VelocityField
    from .qp import SolverSettings
    from .safety_filter import pointwise_cap_field

    kap = gradient_moment(rho.grid.dim)
    u = VelocityField(rho.grid, np.asarray(u_nom, dtype=float))
    solver = solver or SolverSettings(feas_tol=1e-10, opt_tol=1e-10)
    out = pointwise_cap_field(rho, u, rho_max, rho_min, ClassK(alpha1.lam / kap), ClassK(alpha2.lam / kap),
                              convention, solver)
    return out.values


def consistency_study(rho: DensityField, u_nom, u_star, schedule, seeds=(0, 1, 2, 3, 4), rho_max=None,
                      rho_min=None, alpha1: ClassK = ClassK(), alpha2: ClassK = ClassK(),
                      convention: str = "lagrangian") -> list:
    """KDE error and median filtered-velocity deviation along a ``(N, r)`` schedule.

    ``u_nom`` and ``u_star`` are grid velocity arrays of shape ``grid.shape + (dim,)``:
    the nominal field and the macroscopic filtered reference.  Agents query both by
    interpolation at their positions.
    """
    g = rho.grid
    table = []
    for N, r in schedule:
        row = ConsistencyRow(int(N), float(r))
        for s in seeds:
            rng = np.random.default_rng(s)
            sw = sample_swarm(rho, int(N), float(r), rng)
            graph = build_neighbor_graph(sw)
            dens = agent_densities(sw, graph)
            un = interpolate(g, u_nom, sw.positions)
            res = swarm_cap_filter(sw, dens, un, rho_max, rho_min, alpha1, alpha2, convention)
            ref = interpolate(g, u_star, sw.positions)
            row.kde_error.append(kde_error(rho, sw))
            row.deviation.append(float(np.median(np.linalg.norm(res.velocities - ref, axis=1))))
        table.append(row)
    return table


def monotone_within_noise(means, noises, factor: float = 2.0) -> bool:
    """Each entry is at most the previous one plus ``factor`` times the larger run-to-run noise."""
    return all(means[k + 1] <= means[k] + factor * max(noises[k], noises[k + 1]) for k in range(len(means) - 1))


# ---------------------------------------------------------------------------
# swarm scenarios


def destinations(T, positions) -> np.ndarray:
    """Nominal stand-in: each agent heads for the macroscopic map image of its start point."""
    return interpolate(T.grid, T.target, positions)


@dataclass(frozen=True)
class SwarmConfig:
    dt: float
    steps: int
    gamma: object
    mode: str = "cap"
    filtered: bool = True
    rho_max: float | None = None
    rho_min: float | None = None
    alpha1: ClassK = field(default_factory=ClassK)
    alpha2: ClassK = field(default_factory=ClassK)
    convention: str = "lagrangian"
    entropy_eps: float = 3.0
    alpha: ClassK = field(default_factory=lambda: ClassK(1.0))
    consensus_k: float = 1.0
    consensus_dt: float = 0.1
    sub_iters: int = 20
    hq: float | None = None
    trust: float | None = None
    consistent_gradient: bool = True
    snapshot_every: int = 1
    t0: float = 0.0

    def __post_init__(self):
        if self.mode not in ("cap", "entropy"):
            raise ValueError(f"unknown swarm mode {self.mode!r}")
        if not self.dt > 0 or self.steps < 0:
            raise ValueError("need dt > 0 and steps >= 0")


@dataclass
class SwarmSnapshot:
    t: float
    positions: np.ndarray
    velocities: np.ndarray
    rho_hat: np.ndarray
    lam: np.ndarray
    y: np.ndarray


@dataclass
class SwarmTrajectory:
    snapshots: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    final: Swarm | None = None


def _step_diag(t, swarm, graph, dens, cfg, extra):
    deg = graph.degree()
    d = {"t": t, "N": swarm.N, "min_neighbors": int(deg.min()) if deg.size else 0,
         "isolated": int(np.sum(deg == 0)), "rho_hat_max": float(dens.rho.max())}
    if cfg.rho_max is not None:
        d["frac_over_max"] = float(np.mean(dens.rho > cfg.rho_max))
    if cfg.rho_min is not None:
        d["frac_under_min"] = float(np.mean(dens.rho < cfg.rho_min))
    d.update(extra)
    return d


def run_swarm(swarm: Swarm, dest, cfg: SwarmConfig, progress=None) -> SwarmTrajectory:
    """Quasi-static rounds: freeze positions, filter (or run the consensus rounds), then move."""
    dest = np.asarray(dest, dtype=float).reshape(swarm.N, swarm.dim)
    traj = SwarmTrajectory()
    state = ConsensusState.zeros(swarm.N, cfg.consensus_k, cfg.consensus_dt)
    rnd = 0
    for k in range(cfg.steps + 1):
        t = cfg.t0 + k * cfg.dt
        graph = build_neighbor_graph(swarm)
        dens = agent_densities(swarm, graph)
        last = k == cfg.steps
        u_nom = np.zeros_like(dest) if last else cfg.gamma.gamma(t) * (dest - swarm.positions)
        extra = {}
        if cfg.mode == "cap":
            if cfg.filtered and not last:
                vmax = None if cfg.trust is None else cfg.trust * swarm.r / cfg.dt
                res = swarm_cap_filter(swarm, dens, u_nom, cfg.rho_max, cfg.rho_min, cfg.alpha1, cfg.alpha2,
                                       cfg.convention, vmax)
                v = res.velocities
                extra = {"active": int(res.active.sum()), "relaxed": int(res.relaxed.sum()),
                         "stuck": int(res.stuck.sum())}
            else:
                v = u_nom
        else:
            w = cell_weights(swarm, cfg.hq)
            scale = gradient_moment(swarm.dim) if cfg.consistent_gradient else 1.0
            rows = entropy_rows(dens, w, cfg.entropy_eps, cfg.alpha, swarm.N, scale)
            extra = {"entropy_hat": rows.entropy, "cell_mass": float(np.sum(dens.rho * w))}
            v = u_nom
            if cfg.filtered and not last:
                margins = []
                for _ in range(cfg.sub_iters):
                    v, state, rep = distributed_round(graph, rows, state, u_nom, cfg.alpha, cfg.entropy_eps)
                    margins.append(rep.global_margin)
                    traj.rounds.append({"round": rnd, "sum_telescope": rep.sum_telescope,
                                        "max_lambda_spread": rep.max_lambda_spread, "entropy_hat": rep.entropy_hat})
                    rnd += 1
                extra.update(global_margin=float(min(margins)), lambda_max=float(state.lam.max()))
        traj.diagnostics.append(_step_diag(t, swarm, graph, dens, cfg, extra))
        if progress is not None:
            progress(k, traj.diagnostics[-1])
        if last or k % cfg.snapshot_every == 0:
            traj.snapshots.append(SwarmSnapshot(t, swarm.positions.copy(), np.asarray(v).copy(), dens.rho.copy(),
                                                state.lam.copy(), state.y.copy()))
        if last:
            break
        swarm = integrate_agents(swarm, v, cfg.dt)
    traj.final = swarm
    return traj
