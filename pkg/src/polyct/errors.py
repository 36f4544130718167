"""Exceptions raised by polyct. All subclass a built-in so callers can catch broadly."""

from __future__ import annotations


class SpectrumValidationError(ValueError):
    """Invalid spectrum field. Message names the field and, when relevant, the index."""

    def __init__(self, field: str, message: str, *, index: int | None = None, window: int | None = None) -> None:
        where = field if index is None else f"{field}[{index}]"
        if window is not None:
            where = f"windows[{window}].{where}"
        super().__init__(f"{where}: {message}")
        self.field = field
        self.index = index
        self.window = window


class DimensionMismatchError(ValueError):
    pass


class ConstraintParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class SampleSizeError(ValueError):
    pass


class SolverDivergenceError(RuntimeError):
    def __init__(self, solver: str, iteration: int, message: str) -> None:
        super().__init__(f"{solver} diverged at iteration {iteration}: {message}")
        self.solver = solver
        self.iteration = iteration


class SolverStallError(RuntimeError):
    def __init__(self, solver: str, iteration: int, message: str) -> None:
        super().__init__(f"{solver} stalled at iteration {iteration}: {message}")
        self.solver = solver
        self.iteration = iteration


class ProjectionNotConvergedError(RuntimeError):
    def __init__(self, iterations: int, residual: float) -> None:
        super().__init__(f"Dykstra projection did not converge after {iterations} sweeps (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class EigenvalueError(RuntimeError):
    pass


class SweepCheckError(RuntimeError):
    """A sweep finished and wrote its outputs, but a property it must satisfy failed."""

    def __init__(self, scenario: str, failed: list[str], report_path: str) -> None:
        super().__init__(f"{scenario}: failed checks {failed} (see {report_path})")
        self.scenario = scenario
        self.failed = failed
        self.report_path = report_path
