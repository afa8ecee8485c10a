"""Exception types shared across the toolkit."""


class CollisionError(ValueError):
    """State fell within the collision radius of a primary."""


class NonFiniteError(ValueError):
    """A state or residual evaluated to NaN/inf."""


class ConvergenceError(RuntimeError):
    """Scalar root-finding failed (libration point solve)."""


class NoConvergence(RuntimeError):
    """Newton/chord iteration failed to converge."""

    def __init__(self, message, iterations=None, residual_norm=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm


class IllPosedProblem(ValueError):
    """Boundary/integral constraint count does not close the BVP."""


class NotOscillatory(ValueError):
    """Requested eigenvalue pair of an equilibrium is not purely imaginary."""


class NotSimpleEigenvalue(ValueError):
    """Monodromy eigenvalue targeted for eigenfunction growth is complex or multiple."""


class BranchSwitchFailure(RuntimeError):
    """Could not extract or converge onto the bifurcating branch."""


class SectionNotReached(RuntimeError):
    """Grow run hit the integration-time cap before the requested crossing."""

    def __init__(self, message, t_r_max=None):
        super().__init__(message)
        self.t_r_max = t_r_max


class InconsistentParts(ValueError):
    """Coupled-system assembly inputs do not satisfy the matching conditions."""


class InsufficientWindings(RuntimeError):
    """Classification requested on an orbit with too few final windings."""


class NonPositiveExponent(ValueError):
    """Fundamental domain requires a positive Floquet exponent."""


class ConfigError(ValueError):
    """Run configuration invalid (unknown key, out-of-range value, bad reference)."""


class SchemaMismatch(ValueError):
    """Solution file carries an incompatible schema version or a corrupt body."""
