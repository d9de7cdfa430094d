import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from swarmcbf.grid import DensityField, VelocityField, make_grid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def smooth_density(grid, rng, floor=1e-3, bumps=3):
    """Positive mixture of a few Gaussian bumps plus a floor, unit mass."""
    c = grid.centers()
    lo = np.array([b[0] for b in grid.bounds])
    span = np.array([b[1] - b[0] for b in grid.bounds])
    v = np.full(grid.shape, floor)
    for _ in range(bumps):
        m = lo + span * rng.uniform(0.3, 0.7, grid.dim)
        s = (span * rng.uniform(0.08, 0.2, grid.dim)) ** 2
        v = v + rng.uniform(0.2, 1.0) * np.exp(-0.5 * np.sum((c - m) ** 2 / s, axis=-1))
    return DensityField(grid, v).normalized()


def smooth_velocity(grid, rng, scale=1.0):
    c = grid.centers()
    span = np.array([b[1] - b[0] for b in grid.bounds])
    out = np.zeros(grid.shape + (grid.dim,))
    for a in range(grid.dim):
        k = rng.normal(size=(3, grid.dim)) * 2 * np.pi / span
        ph = rng.uniform(0, 2 * np.pi, 3)
        out[..., a] = scale * sum(np.sin(c @ k[j] + ph[j]) for j in range(3))
    return VelocityField(grid, out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid1():
    return make_grid([(-5.0, 20.0)], [2500])


@pytest.fixture
def small1():
    return make_grid([(0.0, 1.0)], [200])


@pytest.fixture
def small2():
    return make_grid([(0.0, 1.0), (0.0, 1.0)], [32, 32])
