"""Weighted projection QP ``min 1/2 sum w (U - U_nom)^2  s.t.  A U >= b``.

Two solvers share one scaled form.  With ``z = sqrt(w) (U - U_nom)`` and unit-norm
rows the problem is the Euclidean projection of the origin onto a polyhedron.

* ``admm``: operator splitting in the OSQP layout (x, slack z, multipliers y) with
  over-relaxation and adaptive penalty.  Because the Hessian is the identity the
  KKT solve reduces, by the Woodbury identity, to a sparse ``m x m`` system
  ``(c/rho) I + A A^T``.  A polishing step re-solves the detected active set
  exactly.  Primal infeasibility is certified from the multiplier increments.
* ``ipm``: primal-dual interior point (Mehrotra predictor-corrector) on the dual
  ``min_{lam >= 0} 1/2 |A^T lam|^2 - b^T lam``; each iteration factors the sparse
  ``m x m`` matrix ``A A^T + S/Lam``.  The default for large problems: rows built
  from discrete divergences make ``A A^T`` ill conditioned and ADMM then crawls.
* ``active-set``: dense dual NNLS for small problems, used for cross-checks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import nnls

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"


@dataclass
class QpSpec:
    weights: np.ndarray
    nominal: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    blocks: list = field(default_factory=list)  # (kind, start, stop)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        self.nominal = np.asarray(self.nominal, dtype=float).ravel()
        n = self.nominal.size
        if self.weights.size == 1 and n > 1:
            self.weights = np.full(n, float(self.weights[0]))
        if self.weights.size != n:
            raise ValueError("weights and nominal differ in length")
        if np.any(self.weights <= 0):
            raise ValueError("QP weights must be positive")
        self.A = sp.csr_matrix(self.A) if self.A is not None else sp.csr_matrix((0, n))
        if self.A.shape[1] != n:
            raise ValueError(f"rows have {self.A.shape[1]} columns, expected {n}")
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.b.size != self.A.shape[0]:
            raise ValueError("rhs length does not match row count")
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.A.data))):
            raise ValueError("non-finite constraint data")

    @property
    def n(self) -> int:
        return self.nominal.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, U) -> float:
        d = np.asarray(U) - self.nominal
        return 0.5 * float(np.sum(self.weights * d * d))

    def violation(self, U) -> float:
        if self.m == 0:
            return 0.0
        return float(max(0.0, np.max(self.b - self.A @ U)))

    def block_slice(self, kind):
        return [slice(a, b) for k, a, b in self.blocks if k == kind]


@dataclass(frozen=True)
class SolverSettings:
    feas_tol: float = 1e-7
    opt_tol: float = 1e-7
    max_iter: int = 20000
    ipm_iter: int = 200
    method: str = "auto"
    dense_rows: int = 50
    rho: float = 0.1
    sigma: float = 1e-6
    relax: float = 1.6
    adaptive_every: int = 25
    check_every: int = 5
    polish: bool = True
    infeas_tol: float = 1e-6

    def __post_init__(self):
        if not (self.feas_tol > 0 and self.opt_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.method not in ("auto", "admm", "ipm", "active-set"):
            raise ValueError(f"unknown QP method {self.method!r}")


@dataclass
class QpSolution:
    U: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    active: np.ndarray
    iterations: int = 0
    multipliers: np.ndarray | None = None
    polished: bool = False
    method: str = ""
    certificate: np.ndarray | None = None  # Farkas vector y >= 0, A^T y = 0, b.y > 0 when infeasible

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _scaled(spec: QpSpec):
    """Return ``(As, bs, norms, keep, trivial_infeasible)`` for ``As z >= bs`` with unit rows."""
    iw = 1.0 / np.sqrt(spec.weights)
    A = spec.A @ sp.diags(iw)
    b = spec.b - spec.A @ spec.nominal
    norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    scale = max(float(norms.max()) if norms.size else 0.0, 1.0)
    zero = norms <= 1e-14 * scale
    bad = bool(np.any(zero & (b > 0)))
    keep = np.flatnonzero(~zero)
    As = sp.diags(1.0 / norms[keep]) @ A[keep]
    bs = b[keep] / norms[keep]
    return As.tocsr(), bs, norms, keep, bad, iw


def _finish(spec, z, lam_s, norms, keep, iw, status, it, polished, method, settings, m_all):
    U = spec.nominal + iw * z
    lam = np.zeros(m_all)
    if lam_s is not None:
        lam[keep] = lam_s / norms[keep]
    prim = spec.violation(U)
    # stationarity of w (U - U_nom) - A^T lam
    stat = spec.weights * (U - spec.nominal) - spec.A.T @ lam
    dual = float(np.max(np.abs(stat / np.sqrt(spec.weights)))) if spec.n else 0.0
    slack = spec.A @ U - spec.b if m_all else np.zeros(0)
    active = np.flatnonzero((np.abs(slack) <= max(10 * settings.feas_tol, 1e-9)) | (lam > settings.opt_tol))
    return QpSolution(U, status, prim, dual, active, it, lam, polished, method)


def _polish(As, bs, z, y, settings):
    """Exact solve on the active set guessed from the multipliers; ``None`` if KKT fails."""
    act = np.flatnonzero((y < -1e-10) | (As @ z - bs < 1e-9 * (1 + np.abs(bs))) & (y <= 0))
    if act.size == 0:
        z0 = np.zeros(As.shape[1])
        return (z0, np.zeros(As.shape[0])) if np.all(As @ z0 >= bs - settings.feas_tol) else None
    Aa = As[act]
    G = (Aa @ Aa.T).tocsc()
    delta = 1e-11
    try:
        lu = spla.splu((G + delta * sp.identity(act.size, format="csc")).tocsc())
    except RuntimeError:
        return None
    lam = lu.solve(bs[act])
    for _ in range(5):
        lam += lu.solve(bs[act] - G @ lam)
    if not np.all(np.isfinite(lam)):
        return None
    zp = Aa.T @ lam
    full = np.zeros(As.shape[0])
    full[act] = lam
    if np.min(lam) < -settings.opt_tol:
        return None
    viol = float(np.max(bs - As @ zp)) if As.shape[0] else 0.0
    if viol > settings.feas_tol:
        return None
    return zp, full


def _admm(As, bs, settings: SolverSettings):
    m, n = As.shape
    sigma, alpha = settings.sigma, settings.relax
    c = 1.0 + sigma
    rho = settings.rho
    AAt = (As @ As.T).tocsc()
    eye = sp.identity(m, format="csc")

    def factor(r):
        return spla.splu((c / r * eye + AAt).tocsc())

    lu = factor(rho)

    def kkt_solve(rhs):
        # ((1+sigma) I + rho A^T A)^{-1} rhs via Woodbury
        return (rhs - As.T @ lu.solve(As @ rhs)) / c

    x = np.zeros(n)
    z = np.maximum(As @ x, bs)
    y = np.zeros(m)
    status = MAX_ITER
    it = 0
    eps_a, eps_r = settings.feas_tol * 0.1, settings.feas_tol * 0.1
    for it in range(1, settings.max_iter + 1):
        rhs = sigma * x + As.T @ (rho * z - y)
        xt = kkt_solve(rhs)
        zt = As @ xt
        x_new = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.maximum(zr + y / rho, bs)
        y_new = y + rho * (zr - z_new)
        dy = y_new - y
        x, z, y = x_new, z_new, y_new
        if it % settings.check_every and it != settings.max_iter:
            continue
        Ax = As @ x
        r_p = float(np.max(np.abs(Ax - z))) if m else 0.0
        ATy = As.T @ y
        r_d = float(np.max(np.abs(x + ATy))) if n else 0.0
        tol_p = eps_a + eps_r * max(np.max(np.abs(Ax)) if m else 0, np.max(np.abs(z)) if m else 0)
        tol_d = eps_a + eps_r * max(np.max(np.abs(x)) if n else 0, np.max(np.abs(ATy)) if n else 0)
        if r_p <= tol_p and r_d <= tol_d:
            status = OPTIMAL
            break
        ndy = float(np.max(np.abs(dy))) if m else 0.0
        if ndy > 0:
            cert = As.T @ dy
            if (np.max(np.abs(cert)) <= settings.infeas_tol * ndy and np.max(dy) <= settings.infeas_tol * ndy
                    and float(bs @ np.minimum(dy, 0)) < -settings.infeas_tol * ndy):
                status = INFEASIBLE
                y = dy / ndy
                break
        if it % settings.adaptive_every == 0 and r_d > 0 and r_p > 0:
            sp_ = max(np.max(np.abs(Ax)), np.max(np.abs(z)), 1e-30)
            sd_ = max(np.max(np.abs(x)), np.max(np.abs(ATy)), 1e-30)
            ratio = np.sqrt((r_p / sp_) / (r_d / sd_))
            new = float(np.clip(rho * ratio, 1e-6, 1e6))
            if new > 5 * rho or new < rho / 5:
                rho = new
                lu = factor(rho)
    return x, z, y, status, it


def _ipm(As, bs, settings: SolverSettings):
    """Mehrotra predictor-corrector for ``min 1/2 lam^T G lam - b^T lam, lam >= 0`` with ``G = A A^T``."""
    m = As.shape[0]
    G = (As @ As.T).tocsc()
    lam = np.ones(m)
    s = np.ones(m)
    bscale = 1.0 + float(np.max(np.abs(bs)))
    tol = settings.feas_tol * 1e-2
    status = MAX_ITER
    it = 0
    for it in range(1, settings.ipm_iter + 1):
        rd = G @ lam - bs - s
        mu = float(lam @ s) / m
        if np.max(np.abs(rd)) <= tol * bscale and mu <= tol * bscale:
            status = OPTIMAL
            break
        if np.max(lam) > 1e10 * bscale:
            lh = lam / np.max(lam)
            if np.max(np.abs(As.T @ lh)) <= settings.infeas_tol and float(bs @ lh) > settings.infeas_tol:
                status = INFEASIBLE
                lam = lh
                break
        M = (G + sp.diags(s / lam)).tocsc()
        try:
            lu = spla.splu(M)
        except RuntimeError:
            break

        def direction(rc):
            dl = lu.solve(-rd + rc / lam)
            return dl, (rc - s * dl) / lam

        dl_a, ds_a = direction(-lam * s)
        a_p = _step(lam, dl_a)
        a_d = _step(s, ds_a)
        a = min(a_p, a_d)
        mu_aff = float((lam + a * dl_a) @ (s + a * ds_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dl, ds = direction(-lam * s - dl_a * ds_a + sigma * mu)
        a = 0.995 * min(_step(lam, dl), _step(s, ds))
        a = min(a, 1.0)
        lam = lam + a * dl
        s = s + a * ds
    x = As.T @ lam
    return x, lam, status, it


def _step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _active_set(As, bs, settings: SolverSettings):
    """Dense dual: ``min_{lam >= 0} 1/2 |A^T lam|^2 - b^T lam`` by NNLS on a Cholesky factor."""
    m, n = As.shape
    Ad = As.toarray()
    G = Ad @ Ad.T
    delta = 1e-13 * max(np.trace(G), 1.0)
    R = sla.cholesky(G + delta * np.eye(m), lower=False)
    rhs = sla.solve_triangular(R, bs, trans="T", lower=False)
    lam, _ = nnls(R, rhs, maxiter=50 * m + 100)
    x = Ad.T @ lam
    viol = float(np.max(bs - Ad @ x)) if m else 0.0
    if viol > settings.feas_tol:
        return x, lam, INFEASIBLE
    return x, lam, OPTIMAL


def _screened(solver, As, bs, settings):
    """Solve with rows that can possibly bind, then verify the rest; exact by construction.

    A unit row with ``b_i <= -R`` cannot bind inside the ball ``|z| <= R``, and the
    projection has norm at most that of the reduced solution whenever the reduced
    solution is feasible for all rows.
    """
    m = As.shape[0]
    tau = 10.0 * (float(np.linalg.norm(np.maximum(bs, 0.0))) + 1e-12)
    keep = bs > -tau
    total = 0
    while True:
        idx = np.flatnonzero(keep)
        x, lam_k, status, it = solver(As[idx], bs[idx], settings)
        total += it
        lam = np.zeros(m)
        lam[idx] = lam_k
        if status == INFEASIBLE or keep.all():
            return x, lam, status, total
        viol = (~keep) & (As @ x < bs - settings.feas_tol * 1e-2)
        if not viol.any():
            return x, lam, status, total
        keep |= viol | (bs > -4 * tau)
        tau *= 4


def solve_qp(spec: QpSpec, settings: SolverSettings | None = None) -> QpSolution:
    settings = settings or SolverSettings()
    m_all = spec.m
    As, bs, norms, keep, bad, iw = _scaled(spec)
    m = As.shape[0]
    if bad:
        sol = _finish(spec, np.zeros(spec.n), None, norms, keep, iw, INFEASIBLE, 0, False, "trivial", settings, m_all)
        zero = np.setdiff1d(np.arange(m_all), keep)
        cert = np.zeros(m_all)
        cert[zero[np.argmax(spec.b[zero] - spec.A[zero] @ spec.nominal)]] = 1.0
        sol.certificate = cert
        return sol
    if m == 0 or np.all(bs <= 0):
        return _finish(spec, np.zeros(spec.n), np.zeros(m), norms, keep, iw, OPTIMAL, 0, False, "trivial",
                       settings, m_all)
    method = settings.method
    if method == "auto":
        method = "active-set" if m <= settings.dense_rows else "ipm"
    if method == "ipm":
        x, lam, status, it = _screened(_ipm, As, bs, settings)
        if status == INFEASIBLE:
            return _infeasible(spec, lam, norms, keep, iw, it, method, settings, m_all)
        polished = False
        if status != INFEASIBLE and settings.polish:
            pol = _polish(As, bs, x, -lam, settings)
            if pol is not None:
                x, lam, polished = pol[0], pol[1], True
                status = OPTIMAL
        if status != OPTIMAL:
            # IPM stalls on singular steps near infeasibility; ADMM certifies or finishes
            log.debug("ipm ended with %s after %d iterations; falling back to admm", status, it)
            x2, _, y, st2, it2 = _admm(As, bs, settings)
            if st2 == INFEASIBLE:
                return _infeasible(spec, -y, norms, keep, iw, it + it2, method, settings, m_all)
            pol = _polish(As, bs, x2, y, settings) if settings.polish else None
            x, lam, status, polished = (pol[0], pol[1], OPTIMAL, True) if pol else (x2, -y, st2, False)
            it += it2
        sol = _finish(spec, x, lam, norms, keep, iw, status, it, polished, method, settings, m_all)
        if sol.status == OPTIMAL and sol.primal_residual > 10 * settings.feas_tol * max(1.0, np.max(np.abs(spec.b))):
            sol.status = MAX_ITER
        return sol
    if method == "active-set":
        x, lam, status = _active_set(As, bs, settings)
        if status == INFEASIBLE:
            # the dense solve only sees a residual; ADMM produces the certificate
            x2, _, y, st2, it2 = _admm(As, bs, settings)
            if st2 == INFEASIBLE:
                return _infeasible(spec, -y, norms, keep, iw, it2, method, settings, m_all)
            status = MAX_ITER
        polished = False
        if status == OPTIMAL and settings.polish:
            pol = _polish(As, bs, x, -lam, settings)
            if pol is not None:
                x, lam, polished = pol[0], pol[1], True
        return _finish(spec, x, lam, norms, keep, iw, status, 1, polished, method, settings, m_all)
    x, z, y, status, it = _admm(As, bs, settings)
    if status == INFEASIBLE:
        return _infeasible(spec, -y, norms, keep, iw, it, method, settings, m_all)
    polished = False
    lam = -y
    if status != INFEASIBLE and settings.polish:
        pol = _polish(As, bs, x, y, settings)
        if pol is not None:
            x, lam, polished = pol[0], pol[1], True
            status = OPTIMAL
    sol = _finish(spec, x, lam, norms, keep, iw, status, it, polished, method, settings, m_all)
    if sol.status == OPTIMAL and sol.primal_residual > 10 * settings.feas_tol * max(1.0, np.max(np.abs(spec.b))):
        sol.status = MAX_ITER
    return sol


def _infeasible(spec, ys, norms, keep, iw, it, method, settings, m_all):
    sol = _finish(spec, np.zeros(len(iw)), None, norms, keep, iw, INFEASIBLE, it, False, method, settings, m_all)
    y = np.zeros(m_all)
    y[keep] = np.maximum(ys, 0.0) / norms[keep]
    n = float(np.max(y)) if m_all else 0.0
    sol.certificate = y / n if n > 0 else y
    return sol


def check_certificate(spec: QpSpec, y, tol: float = 1e-6) -> bool:
    """True when ``y`` proves ``A U >= b`` empty: ``y >= 0``, ``A^T y ~ 0``, ``b.y > 0``."""
    if y is None:
        return False
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        return False
    scale = max(float(np.max(np.abs(y))), 1e-300)
    yn = y / scale
    row_norm = np.sqrt(np.asarray(spec.A.multiply(spec.A).sum(axis=1)).ravel())
    resid = float(np.max(np.abs(spec.A.T @ yn))) if spec.n else 0.0
    return resid <= tol * max(float(row_norm @ yn), 1.0) and float(spec.b @ yn) > tol * max(resid, 1e-300)


def halfspace_projection(u0, a, b, weights=None):
    """Closed form of ``min 1/2 sum w (u - u0)^2  s.t.  a.u >= b``."""
    u0 = np.asarray(u0, dtype=float)
    a = np.asarray(a, dtype=float)
    w = np.ones_like(u0) if weights is None else np.asarray(weights, dtype=float)
    gap = b - a @ u0
    if gap <= 0:
        return u0.copy()
    return u0 + gap * (a / w) / float(a @ (a / w))
