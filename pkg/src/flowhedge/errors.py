"""Exception hierarchy shared by every module."""

from __future__ import annotations


class FlowHedgeError(Exception):
    """Base class for all engine errors."""


class NonInvertibleCoefficient(FlowHedgeError):
    """sigma or rho is (numerically) singular at a sampled state."""


class IntensityBoundViolated(FlowHedgeError):
    """A realized intensity exceeded the thinning bound of its grid step."""


class StepTooCoarse(FlowHedgeError):
    """The covariance ODE lost positive semidefiniteness beyond tolerance."""


class PositivityLost(FlowHedgeError):
    """A component of the unnormalized chain filter became non-positive."""


class GateClosed(FlowHedgeError):
    """An event was reported on a channel whose gate was closed."""


class BlowUp(FlowHedgeError):
    """The backward Riccati system diverged."""

    def __init__(self, time: float, norm: float):
        super().__init__(f"Riccati solution blew up at t={time:.6g} (norm {norm:.3g})")
        self.time = time
        self.norm = norm


class SurfaceNotFitted(FlowHedgeError):
    pass


class RankDeficientBasis(FlowHedgeError):
    pass


class NegativeQueue(FlowHedgeError):
    pass


class ConfigInvalid(FlowHedgeError):
    """Config failed validation; ``field`` is the dotted path of the offender."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class PipelineFailed(FlowHedgeError):
    def __init__(self, pipeline: str, cause: Exception):
        super().__init__(f"pipeline {pipeline!r} failed: {cause}")
        self.pipeline = pipeline
        self.cause = cause
