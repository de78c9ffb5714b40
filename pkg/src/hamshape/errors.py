"""Exception types shared across the solver stack."""


class HamshapeError(Exception):
    """Base class for all library errors."""


class SolverFailure(HamshapeError):
    """A linear solve did not reach the required residual."""

    def __init__(self, msg: str, residual: float | None = None):
        super().__init__(msg if residual is None else f"{msg} (residual {residual:.3e})")
        self.residual = residual


class AnchorError(HamshapeError):
    """No negative component of the level function touches the anchor."""


class PinProjectionError(HamshapeError):
    """The pin constraint system is rank deficient."""


class TraceError(HamshapeError):
    """Orbit tracing failed (no return within the arc bound, or stiffness)."""


class DegenerateTraceError(TraceError):
    """Both velocity components vanish at the period endpoint."""


class NeumannCompatibilityError(HamshapeError):
    """Manufactured state does not satisfy the boundary flux condition."""


class ConfigError(HamshapeError):
    """Run configuration failed schema validation."""


class LineSearchError(HamshapeError):
    """Backtracking found no acceptable decrease."""

    def __init__(self, msg: str, diagnostics: dict | None = None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}
