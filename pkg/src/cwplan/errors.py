"""Exception types shared across the package."""


class SynthesisError(RuntimeError):
    """Gain synthesis failed (Riccati non-convergence, singular feedforward)."""


class StabilityError(RuntimeError):
    """A matrix required to be Schur is not, or a stability-dependent solve failed."""


class ConstructionError(RuntimeError):
    """Admissible-set construction could not be finitely determined."""


class NoPathError(RuntimeError):
    """Goal unreachable from start; carries the reachable component."""

    def __init__(self, message, reachable=()):
        super().__init__(message)
        self.reachable = tuple(reachable)


class StartError(RuntimeError):
    """Simulation started from an inadmissible initial estimate."""


class StalenessError(RuntimeError):
    """An input file does not match the scenario that produced it."""


class ScenarioError(ValueError):
    """Scenario file failed schema or value validation."""
