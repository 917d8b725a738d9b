"""Exception and warning types raised across the package."""


class DegeneratePostSelection(ValueError):
    """Raised when the post-selection success probability falls below the floor."""

    def __init__(self, p0: float, floor: float = 1e-12):
        super().__init__(f"post-selection probability {p0:.3e} is below {floor:.0e}")
        self.p0 = p0


class NoJumpMass(ValueError):
    """Raised when jump trajectories are requested but the total jump probability is zero."""


class OptimizationDiverged(RuntimeError):
    """Raised when an objective or gradient evaluation returns a non-finite value."""


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


class TruncationWarning(UserWarning):
    """The Fock-space truncation is too small for the requested coherent amplitude."""
