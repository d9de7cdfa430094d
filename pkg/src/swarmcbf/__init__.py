"""Safety-filtered steering of swarm densities: grids, transport, barriers, filters, agents, scenarios."""

from .barriers import (
    CapBarrier,
    ClassK,
    CohesionBarrier,
    ConflictBarrier,
    EntropyBarrier,
    FloorBarrier,
    KLBarrier,
    ObstacleBarrier,
    PointwiseBarrier,
    WassersteinBarrier,
)
from .errors import *  # noqa: F401,F403
from .grid import DensityField, Grid, VelocityField, gaussian_density, make_grid, uniform_density
from .qp import QpSpec, SolverSettings, solve_qp
from .safety_filter import ClfSpec, FilterConfig, filter_step, run_scenario
from .transport import SinkhornParams, SpeedSchedule, transport_map

__version__ = "0.1.0"
