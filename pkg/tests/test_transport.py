import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from conftest import smooth_density
from swarmcbf.errors import ScheduleExpired, SupportError, UnsupportedDimensionError
from swarmcbf.grid import (
    DensityField,
    VelocityField,
    advect_explicit,
    cdf_1d,
    explicit_dt_bound,
    gaussian_density,
    make_grid,
    uniform_density,
    w2_1d,
)
from swarmcbf.transport import (
    Coupling,
    SinkhornParams,
    SpeedSchedule,
    TransportMap,
    barycentric_map,
    kl_divergence,
    kl_gradient_flow_field,
    nominal_ot_field,
    ot_map_1d,
    ot_map_grid,
    sinkhorn,
    transport_map,
    write_coupling_csv,
)


def lp_cost(C, a, b):
    n, m = C.shape
    A = [np.kron(np.eye(n)[i], np.ones(m)) for i in range(n)] + [np.kron(np.ones(n), np.eye(m)[j]) for j in range(m)]
    return linprog(C.ravel(), A_eq=np.array(A), b_eq=np.r_[a, b], bounds=(0, None)).fun


def test_ot_map_1d_examples(grid1):
    x = grid1.axis_centers(0)
    dx = grid1.spacing[0]
    n01 = gaussian_density(grid1, [0], [1])
    on = n01.values > 1e-8
    T = ot_map_1d(n01, n01)
    assert np.abs(T.target[on, 0] - x[on]).max() <= 2 * dx
    T = ot_map_1d(n01, gaussian_density(grid1, [2], [1]))
    core = n01.values > 1e-4
    assert np.abs(T.target[core, 0] - x[core] - 2).max() <= 2 * dx
    T = ot_map_1d(n01, uniform_density(grid1, [(10, 14)]))
    assert np.interp(0.0, x, T.target[:, 0]) == pytest.approx(12.0, abs=2 * dx)
    assert np.all(np.diff(T.target[on, 0]) >= -1e-9)
    with pytest.raises(UnsupportedDimensionError):
        g2 = make_grid([(0, 1), (0, 1)], [8, 8])
        ot_map_1d(uniform_density(g2, [(0, 1), (0, 1)]), uniform_density(g2, [(0, 1), (0, 1)]))


def test_sinkhorn_small_examples():
    P = sinkhorn(np.zeros((1, 1)), [1.0], [1.0], SinkhornParams(0.1))
    assert P.weights[0, 0] == pytest.approx(1.0)
    P = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5], [0.5, 0.5], SinkhornParams(0.1, tol=1e-12))
    w = P.weights
    assert w[0, 0] == pytest.approx(w[1, 1], abs=1e-14) and w[0, 0] > w[0, 1]
    assert np.abs(w.sum(1) - 0.5).max() <= 1e-12 and np.abs(w.sum(0) - 0.5).max() <= 1e-12


def test_sinkhorn_matches_lp_on_3x3(rng):
    for _ in range(20):
        C = rng.random((3, 3))
        a = rng.random(3)
        a /= a.sum()
        b = rng.random(3)
        b /= b.sum()
        P = sinkhorn(C, a, b, SinkhornParams(1e-3 * np.median(C)))
        exact = lp_cost(C, a, b)
        assert P.cost(C) == pytest.approx(exact, rel=1e-2)


@given(st.integers(0, 2**31 - 1), st.floats(1e-2, 1.0))
def test_sinkhorn_marginals(seed, eps):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(2, 8, 2)
    C = rng.random((n, m))
    a = rng.random(n) + 0.05
    b = rng.random(m) + 0.05
    a /= a.sum()
    b /= b.sum()
    tol = 1e-9
    P = sinkhorn(C, a, b, SinkhornParams(eps, tol=tol))
    assert np.abs(P.weights.sum(1) - a).max() <= tol
    assert np.abs(P.weights.sum(0) - b).max() <= tol
    assert P.weights.min() >= 0


@given(st.integers(0, 2**31 - 1))
def test_sinkhorn_cost_monotone_in_eps(seed):
    rng = np.random.default_rng(seed)
    C = rng.random((5, 5))
    a = np.full(5, 0.2)
    b = rng.random(5) + 0.1
    b /= b.sum()
    costs = [sinkhorn(C, a, b, SinkhornParams(e, tol=1e-12)).cost(C) for e in (0.01, 0.05, 0.2)]
    assert costs[0] <= costs[1] + 1e-8 and costs[1] <= costs[2] + 1e-8


def test_barycentric_examples():
    g = make_grid([(0, 1)], [4])
    x = g.points()
    pi = Coupling(np.eye(4) / 4, np.full(4, 0.25), np.full(4, 0.25))
    T = barycentric_map(pi, x, g)
    assert np.allclose(T.target[:, 0], x[:, 0])
    w = np.array([[0.1, 0.3, 0.0, 0.2]])
    y = np.array([[1.0], [2.0], [3.0], [4.0]])
    one = Coupling(w, np.array([0.6]), w[0], source_index=np.array([2]))
    T = barycentric_map(one, y, g)
    assert T.target[2, 0] == pytest.approx((0.1 + 0.6 + 0.8) / 0.6)
    assert T.target[0, 0] == pytest.approx(x[0, 0])  # no source mass keeps T(x) = x


def test_barycentric_1d_matches_exact():
    g = make_grid([(-5, 7)], [600])
    r = gaussian_density(g, [0], [1])
    e = gaussian_density(g, [2], [0.5])
    M = ot_map_grid(r, e, SinkhornParams(1e-3, tol=1e-9))
    exact = ot_map_1d(r, e)
    F = cdf_1d(r)
    x = g.axis_centers(0)
    core = (F(x) > 0.005) & (F(x) < 0.995)
    assert np.abs(M.target[core, 0] - exact.target[core, 0]).max() <= 3 * g.spacing[0]
    assert M.approximate


def test_2d_grid_map_shift():
    g = make_grid([(0, 8), (0, 8)], [80, 80])
    r = gaussian_density(g, [2, 2], [0.2, 0.2])
    e = gaussian_density(g, [5, 6], [0.2, 0.2])
    T = transport_map(r, e, SinkhornParams(1e-2, tol=1e-7))
    on = r.values > 1e-2
    disp = T.displacement()[on]
    assert np.abs(disp - [3, 4]).max() < 0.1
    assert T.w2 == pytest.approx(5.0, abs=0.05)


def test_pushforward_matches_target(grid1, rng):
    r = gaussian_density(grid1, [0], [1])
    e = uniform_density(grid1, [(10, 14)])
    T = ot_map_1d(r, e)
    x = grid1.axis_centers(0)
    samples = rng.normal(size=100_000)
    pushed = np.interp(samples, x, T.target[:, 0])
    hist, _ = np.histogram(pushed, bins=grid1.axis_edges(0))
    h = DensityField(grid1, hist.astype(float)).normalized()
    # sampling error of W2 between empirical and true uniform on a width-4 interval
    assert w2_1d(h, e) <= 5 * grid1.spacing[0] + 3 * 4 / np.sqrt(100_000)


def test_nominal_ot_field_examples():
    g = make_grid([(0, 4)], [40])
    x = g.axis_centers(0)
    sched = SpeedSchedule(horizon=1.0)
    assert np.all(nominal_ot_field(TransportMap(g, x), sched, 0.0).values == 0)
    assert np.allclose(nominal_ot_field(TransportMap(g, x + 2), SpeedSchedule("constant", gain=1.0), 0.0).values, 2)
    assert np.allclose(nominal_ot_field(TransportMap(g, x + 1), sched, 0.5).values, 2.0)
    with pytest.raises(ScheduleExpired):
        nominal_ot_field(TransportMap(g, x + 1), sched, 1.0)


def test_nominal_linear_in_gain():
    g = make_grid([(0, 4)], [40])
    T = TransportMap(g, g.axis_centers(0) ** 1.5 / 3)
    u1 = nominal_ot_field(T, SpeedSchedule("constant", gain=1.5, gain_cap=100), 0.0).values
    u2 = nominal_ot_field(T, SpeedSchedule("constant", gain=3.0, gain_cap=100), 0.0).values
    assert np.array_equal(2 * u1, u2)


@given(st.floats(0.0, 0.999))
def test_schedule_bounds(t):
    s = SpeedSchedule(horizon=1.0, gain_cap=20.0)
    assert 0 <= s.gamma(t) <= 20.0


def test_kl_field_examples():
    g = make_grid([(-8, 10)], [1800])
    r = gaussian_density(g, [0], [1])
    assert np.abs(kl_gradient_flow_field(r, r).values).max() < 1e-9
    u = kl_gradient_flow_field(r, gaussian_density(g, [2], [1]))
    x = g.axis_centers(0)
    core = np.abs(x) < 3
    assert np.abs(u.values[core, 0] - 2).max() < 5e-2
    g2 = make_grid([(0, 1)], [10])
    with pytest.raises(SupportError):
        kl_gradient_flow_field(uniform_density(g2, [(0, 1)]), uniform_density(g2, [(0, 0.5)]))


def test_kl_decreases_along_flow(rng):
    g = make_grid([(-8, 8)], [320])
    for _ in range(20):
        r = gaussian_density(g, rng.uniform(-1, 1, 1), rng.uniform(0.5, 2, 1))
        e = gaussian_density(g, rng.uniform(-1, 1, 1), rng.uniform(0.5, 2, 1))
        u = kl_gradient_flow_field(r, e)
        step = advect_explicit(r, u, 0.5 * explicit_dt_bound(u))
        assert kl_divergence(step, e) < kl_divergence(r, e)


def test_coupling_csv(tmp_path):
    P = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5], [0.5, 0.5], SinkhornParams(0.01, tol=1e-12))
    write_coupling_csv(tmp_path / "c.csv", P)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "i,j,weight"
    assert len(lines) == 3  # the off-diagonal weights ~e^-100 are dropped
