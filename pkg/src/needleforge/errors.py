"""Exception hierarchy shared by all modules."""


class NeedleForgeError(Exception):
    """Base class for all package errors."""


class ConfigError(NeedleForgeError, ValueError):
    """Invalid configuration value or unknown key."""


class MeshError(NeedleForgeError, ValueError):
    """Degenerate or otherwise unusable mesh geometry."""


class DataError(NeedleForgeError, ValueError):
    """Malformed or non-finite dataset content."""


class UsageError(NeedleForgeError, RuntimeError):
    """An operation was called in a state where it is not defined."""


class SimulationDiverged(NeedleForgeError, RuntimeError):
    """Element inversion, non-finite state or linear solver failure."""


class ConstraintDegeneracyError(SimulationDiverged):
    """The constraint Schur complement is singular."""

    def __init__(self, arc_coords):
        self.arc_coords = list(arc_coords)
        coords = ", ".join(f"{1e3 * s:.4f} mm" for s in self.arc_coords)
        super().__init__(f"singular constraint system; offending arc coordinates: {coords}")
