"""Exception hierarchy shared by every kfcool module."""


class KfcoolError(Exception):
    """Base class for all errors raised by kfcool."""


class InvalidInputError(KfcoolError, ValueError):
    """An argument violates a documented precondition."""


class StabilityError(KfcoolError):
    """The integrator step is outside its stable region, or the trap is inverted."""


class NoSteadyStateError(KfcoolError):
    """A Riccati iteration has no fixed point or failed to reach it."""


class NumericalError(KfcoolError):
    """A numerical degeneracy (non-positive innovation variance, undefined phase...)."""


class FitError(KfcoolError):
    """Nonlinear least squares failed to converge."""

    def __init__(self, message, residual_norm=None):
        super().__init__(message)
        self.residual_norm = residual_norm


class NoPeakError(FitError):
    """The fit window contains no resolvable peak above the floor."""


class CalibrationError(KfcoolError):
    """Reference and measured spectra cannot be compared."""


class ScenarioError(KfcoolError):
    """A scenario stage failed. ``stage`` names the stage that raised."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
