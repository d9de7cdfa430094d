import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import ndtr

from conftest import smooth_density, smooth_velocity
from swarmcbf.errors import CFLError, DomainError, PreconditionError, ShapeError, UnsupportedDimensionError
from swarmcbf.grid import (
    DensityField,
    VelocityField,
    advect_explicit,
    advect_implicit_upwind,
    cdf_1d,
    entropy,
    explicit_dt_bound,
    flux_divergence,
    gaussian_density,
    gradient,
    make_grid,
    quantile_1d,
    read_field_csv,
    total_mass,
    uniform_density,
    w2_1d,
    write_field_csv,
)


def test_grid_validation():
    with pytest.raises(UnsupportedDimensionError):
        make_grid([(0, 1)] * 3, [4, 4, 4])
    g = make_grid([(0, 8), (0, 8)], [160, 160])
    assert g.spacing == (0.05, 0.05) and g.size == 25600
    assert g.bounds == [(0.0, 8.0), (0.0, 8.0)]


def test_entropy_examples(small2):
    g = make_grid([(0.0, math.exp(3.0))], [1000])
    assert entropy(uniform_density(g, [(0.0, math.exp(3.0))])) == pytest.approx(3.0, abs=1e-12)
    spike = np.zeros(small2.shape)
    spike[3, 4] = 1.0 / small2.cell_volume
    assert entropy(DensityField(small2, spike)) == pytest.approx(math.log(small2.cell_volume), abs=1e-12)
    g1 = make_grid([(-5, 20)], [2500])
    assert entropy(gaussian_density(g1, [0], [1])) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-3)


def test_gradient_examples():
    g = make_grid([(0, 2)], [200])
    x = g.axis_centers(0)
    assert np.all(gradient(np.full(200, 3.0), g) == 0)
    assert np.allclose(gradient(x, g)[1:-1, 0], 1.0, atol=1e-12)
    k = np.argmin(abs(x - 1.005))
    d = gradient(x**2, g)[k, 0]
    assert d == pytest.approx(2 * x[k], abs=1e-4)


def test_flux_divergence_examples(grid1):
    rho = gaussian_density(grid1, [0], [1])
    assert np.all(flux_divergence(rho, VelocityField.zeros(grid1)) == 0)
    const = DensityField(grid1, np.full(2500, 1 / 25))
    div = flux_divergence(const, VelocityField.constant(grid1, 1.0))
    assert np.abs(div[1:-1]).max() < 1e-12
    g = make_grid([(-5, 20)], [2500])
    x = g.axis_centers(0)
    div = flux_divergence(rho, VelocityField.constant(g, 1.0))
    k = np.argmin(abs(x - 1.0))
    assert div[k] == pytest.approx(-0.2420, abs=5e-3)


def test_flux_divergence_grid_mismatch(small1, small2):
    with pytest.raises(ShapeError):
        flux_divergence(uniform_density(small1, [(0, 1)]), VelocityField.zeros(small2))


def test_implicit_examples(grid1):
    rho = gaussian_density(grid1, [0], [1])
    assert np.array_equal(advect_implicit_upwind(rho, VelocityField.zeros(grid1), 0.1).values, rho.values)
    u = VelocityField.constant(grid1, 1.0)
    r = rho
    for _ in range(1000):
        r = advect_implicit_upwind(r, u, 1e-3)
    x = grid1.axis_centers(0)
    assert np.sum(x * r.values) * grid1.spacing[0] == pytest.approx(1.0, abs=0.02)
    assert abs(total_mass(r) - 1) < 1e-9


def test_explicit_examples(small2, rng):
    rho = smooth_density(small2, rng)
    assert np.array_equal(advect_explicit(rho, VelocityField.zeros(small2), 0.1).values, rho.values)
    u = smooth_velocity(small2, rng)
    dt_max = explicit_dt_bound(u)
    with pytest.raises(CFLError) as err:
        advect_explicit(rho, u, 2 * dt_max)
    assert err.value.dt_max == pytest.approx(dt_max)
    # implicit and explicit agree to O(dt^2): halving dt quarters the gap
    gaps = []
    for dt in (dt_max / 4, dt_max / 8):
        gaps.append(np.abs(advect_explicit(rho, u, dt).values - advect_implicit_upwind(rho, u, dt).values).max())
    assert gaps[1] / gaps[0] == pytest.approx(0.25, abs=0.03)


def test_cdf_and_quantile_examples(grid1):
    F = cdf_1d(uniform_density(grid1, [(10, 14)]))
    assert F(12.0) == pytest.approx(0.5, abs=1e-12)
    assert quantile_1d(F, 0.25) == pytest.approx(11.0, abs=grid1.spacing[0])
    assert quantile_1d(F, 0.0) == pytest.approx(10.0, abs=grid1.spacing[0])
    G = cdf_1d(gaussian_density(grid1, [0], [1]))
    assert G(0.0) == pytest.approx(0.5, abs=1e-3)
    assert G(1.6449) == pytest.approx(0.95, abs=1e-3)
    assert quantile_1d(G, 0.8413) == pytest.approx(1.0, abs=2 * grid1.spacing[0])
    assert G.values[-1] == pytest.approx(1.0, abs=1e-6)
    assert np.all(np.diff(G.values) >= 0)
    with pytest.raises(DomainError):
        quantile_1d(G, 1.5)


def test_w2_examples(grid1):
    n01 = gaussian_density(grid1, [0], [1])
    assert w2_1d(n01, n01) == pytest.approx(0.0, abs=1e-8)
    assert w2_1d(n01, gaussian_density(grid1, [2], [1])) == pytest.approx(2.0, abs=1e-2)
    wide = make_grid([(-12, 12)], [2400])  # 5 sigma margin for the sigma=2 density
    assert w2_1d(gaussian_density(wide, [0], [1]), gaussian_density(wide, [0], [4])) == pytest.approx(1.0, abs=1e-2)
    with pytest.raises(PreconditionError):
        w2_1d(DensityField(grid1, 2 * n01.values), n01)


def test_reference_densities(grid1):
    n01 = gaussian_density(grid1, [0], [1])
    assert n01.values.max() == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-3)
    u = uniform_density(grid1, [(10, 14)])
    assert set(np.unique(np.round(u.values, 12))) == {0.0, 0.25}
    # a cell centre sits on the mean; on the 160^2 preset grid the mean is a cell corner
    g2 = make_grid([(-0.05, 8.05), (-0.05, 8.05)], [81, 81])
    assert gaussian_density(g2, [1, 1], [0.05, 0.05]).values.max() == pytest.approx(20 / (2 * math.pi), abs=1e-2)
    with pytest.raises(DomainError):
        uniform_density(grid1, [(15, 25)])


def test_field_csv_roundtrip(tmp_path, small2, rng):
    rho = smooth_density(small2, rng)
    u = smooth_velocity(small2, rng)
    write_field_csv(tmp_path / "f.csv", rho, u)
    g, rho2, u2 = read_field_csv(tmp_path / "f.csv")
    assert g == small2
    assert np.array_equal(rho2.values, rho.values) and np.array_equal(u2.values, u.values)
    assert (tmp_path / "f.csv").read_text().startswith("# grid: 2,")


seeds = st.integers(0, 2**31 - 1)


@given(seeds, st.floats(1e-4, 1.0), st.sampled_from([1, 2]))
def test_implicit_mass_and_positivity(seed, dt, dim):
    rng = np.random.default_rng(seed)
    g = make_grid([(0, 1)] * dim, [64] * dim if dim == 1 else [20, 20])
    rho = smooth_density(g, rng)
    out = advect_implicit_upwind(rho, smooth_velocity(g, rng, scale=5.0), dt)
    assert abs(total_mass(out) - total_mass(rho)) <= 1e-9
    assert out.values.min() >= -1e-12


@given(seeds, st.floats(0.05, 1.0))
def test_explicit_mass_and_positivity(seed, frac):
    rng = np.random.default_rng(seed)
    g = make_grid([(0, 1), (0, 1)], [16, 16])
    rho = smooth_density(g, rng)
    u = smooth_velocity(g, rng)
    out = advect_explicit(rho, u, frac * explicit_dt_bound(u))
    assert abs(total_mass(out) - total_mass(rho)) <= 1e-12
    assert out.values.min() >= -1e-12


def test_translation_refines():
    errs = []
    for n in (500, 1000, 2000):
        g = make_grid([(-6, 10)], [n])
        r = gaussian_density(g, [0], [1])
        u = VelocityField.constant(g, 2.0)
        for _ in range(50):
            r = advect_implicit_upwind(r, u, 0.02)
        errs.append(w2_1d(r, gaussian_density(g, [2], [1])))
    assert errs[0] > errs[1] > errs[2]


@given(seeds)
def test_w2_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    g = make_grid([(0, 1)], [100])
    a, b, c = (smooth_density(g, rng, floor=rng.uniform(0, 1e-2)) for _ in range(3))
    assert w2_1d(a, c) <= w2_1d(a, b) + w2_1d(b, c) + 1e-6
    assert w2_1d(a, b) == pytest.approx(w2_1d(b, a), abs=1e-12)


@given(seeds)
def test_quantile_inverts_cdf(seed):
    rng = np.random.default_rng(seed)
    g = make_grid([(0, 1)], [100])
    rho = smooth_density(g, rng)
    F = cdf_1d(rho)
    x = g.axis_centers(0)
    assert np.abs(quantile_1d(F, F(x)) - x).max() <= 2 * g.spacing[0]


def test_cdf_matches_normal(grid1):
    F = cdf_1d(gaussian_density(grid1, [0], [1]))
    x = np.linspace(-3, 3, 13)
    assert np.abs(F(x) - ndtr(x)).max() < 1e-3
