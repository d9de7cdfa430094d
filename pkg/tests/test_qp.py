import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from swarmcbf.qp import (
    INFEASIBLE,
    OPTIMAL,
    QpSpec,
    SolverSettings,
    check_certificate,
    halfspace_projection,
    solve_qp,
)

METHODS = ("admm", "ipm", "active-set")


def test_clip_example():
    for m in METHODS:
        s = solve_qp(QpSpec([1.0], [1.0], sp.csr_matrix([[1.0]]), [2.0]), SolverSettings(method=m))
        assert s.status == OPTIMAL and s.U[0] == pytest.approx(2.0, abs=1e-9)


def test_contradictory_rows_infeasible():
    spec = QpSpec([1.0], [0.3], sp.csr_matrix([[1.0], [-1.0]]), [1.0, 0.0])
    for m in METHODS:
        s = solve_qp(spec, SolverSettings(method=m))
        assert s.status == INFEASIBLE, m
        assert check_certificate(spec, s.certificate), m


def test_zero_row_with_positive_rhs_infeasible():
    spec = QpSpec([1.0, 1.0], [0.0, 0.0], sp.csr_matrix([[0.0, 0.0], [1.0, 0.0]]), [1.0, 0.0])
    s = solve_qp(spec)
    assert s.status == INFEASIBLE and check_certificate(spec, s.certificate)


def test_unconstrained_and_inactive():
    u0 = np.array([0.5, -1.0, 2.0])
    s = solve_qp(QpSpec(np.ones(3), u0, None, []))
    assert np.array_equal(s.U, u0)
    s = solve_qp(QpSpec(np.ones(3), u0, sp.csr_matrix([[1.0, 0, 0]]), [-5.0]))
    assert np.array_equal(s.U, u0)


@given(st.integers(0, 2**31 - 1), st.sampled_from(METHODS))
def test_single_halfspace_matches_closed_form(seed, method):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    u0, a, w = rng.normal(size=n), rng.normal(size=n), rng.uniform(0.5, 2, n)
    b = float(rng.normal())
    s = solve_qp(QpSpec(w, u0, sp.csr_matrix(a[None]), [b]), SolverSettings(method=method))
    assert np.abs(s.U - halfspace_projection(u0, a, b, w)).max() <= 1e-8


@given(st.integers(0, 2**31 - 1))
def test_kkt_and_feasibility(seed):
    rng = np.random.default_rng(seed)
    n, m = 6, 9
    A = rng.normal(size=(m, n))
    x_feas = rng.normal(size=n)
    b = A @ x_feas - rng.uniform(0, 1, m)
    spec = QpSpec(rng.uniform(0.5, 2, n), rng.normal(size=n) * 3, sp.csr_matrix(A), b)
    sols = [solve_qp(spec, SolverSettings(method=mth, feas_tol=1e-9, opt_tol=1e-9)) for mth in METHODS]
    for s in sols:
        assert s.status == OPTIMAL
        assert s.primal_residual <= 1e-8 and s.dual_residual <= 1e-6
        assert np.all(s.multipliers >= -1e-9)
    assert np.abs(sols[0].U - sols[2].U).max() < 1e-6 and np.abs(sols[1].U - sols[2].U).max() < 1e-6


def test_idempotent_on_feasible_nominal(rng):
    A = sp.random(50, 200, density=0.05, random_state=3, format="csr")
    u0 = rng.normal(size=200)
    spec = QpSpec(np.ones(200), u0, A, A @ u0 - 0.1)
    for m in METHODS:
        assert np.abs(solve_qp(spec, SolverSettings(method=m)).U - u0).max() <= 1e-7


def test_large_sparse_ipm_matches_admm(rng):
    n, m = 3000, 400
    A = sp.random(m, n, density=0.003, random_state=1, format="csr")
    b = A @ rng.normal(size=n) + rng.normal(size=m) * 0.5
    spec = QpSpec(np.ones(n), np.zeros(n), A, b)
    s1 = solve_qp(spec, SolverSettings(method="ipm", feas_tol=1e-9, opt_tol=1e-9))
    s2 = solve_qp(spec, SolverSettings(method="admm", feas_tol=1e-9, opt_tol=1e-9))
    assert s1.status == OPTIMAL and s2.status == OPTIMAL
    assert np.abs(s1.U - s2.U).max() < 1e-5


def test_rejects_bad_specs():
    with pytest.raises(ValueError):
        QpSpec([0.0], [1.0], None, [])
    with pytest.raises(ValueError):
        QpSpec([1.0], [1.0], sp.csr_matrix([[1.0, 2.0]]), [0.0])
    with pytest.raises(ValueError):
        SolverSettings(method="simplex")
