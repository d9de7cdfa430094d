"""Exception types raised across the package."""


class SwarmCBFError(Exception):
    """Base class for all package errors."""


class InvalidDomainError(SwarmCBFError, ValueError):
    pass


class DomainError(SwarmCBFError, ValueError):
    """A point, box or probability lies outside the admissible range."""


class ShapeError(SwarmCBFError, ValueError):
    """Fields defined on different grids, or arrays of the wrong shape."""


class PreconditionError(SwarmCBFError, ValueError):
    pass


class SupportError(SwarmCBFError, ValueError):
    """Densities whose supports are incompatible for a log-ratio functional."""


class UnsupportedDimensionError(SwarmCBFError, ValueError):
    pass


class CFLError(SwarmCBFError, ValueError):
    def __init__(self, dt, dt_max):
        self.dt = dt
        self.dt_max = dt_max
        super().__init__(f"explicit step dt={dt:g} violates CFL bound; use dt <= {dt_max:g}")


class SolverFailure(SwarmCBFError, RuntimeError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message if residual is None else f"{message} (residual={residual:.3e})")


class NonConvergenceError(SolverFailure):
    pass


class NumericalError(SwarmCBFError, FloatingPointError):
    pass


class ScheduleExpired(SwarmCBFError, ValueError):
    pass


class StartStateError(SwarmCBFError, ValueError):
    """The initial density violates one of the configured barriers."""

    def __init__(self, barrier, value):
        self.barrier = barrier
        self.value = value
        super().__init__(f"initial state violates barrier {barrier!r}: H = {value:.6g}")


class InfeasibleQPError(SwarmCBFError, RuntimeError):
    """Raised by the filtering loop when the safety QP has no solution."""

    def __init__(self, message, snapshot=None, solution=None):
        self.snapshot = snapshot
        self.solution = solution
        super().__init__(message)


class LocalInfeasibilityError(SwarmCBFError, ValueError):
    def __init__(self, lower, upper):
        self.lower = lower
        self.upper = upper
        super().__init__(f"empty feasible interval [{lower:.6g}, {upper:.6g}]")


class LocalityViolation(SwarmCBFError, ValueError):
    pass


class ConfigError(SwarmCBFError, ValueError):
    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class ComparisonError(SwarmCBFError, ValueError):
    pass
