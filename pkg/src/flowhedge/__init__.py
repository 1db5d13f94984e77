"""Filtering and mean-variance hedging for funds with hidden risk premia and random flows."""

from __future__ import annotations

from .claims import ClaimSpec, constant_claim, price_claim, running_fee
from .coefficients import Affine, Constant, LogLinear
from .errors import (
    BlowUp,
    ConfigInvalid,
    FlowHedgeError,
    GateClosed,
    IntensityBoundViolated,
    NegativeQueue,
    NonInvertibleCoefficient,
    PipelineFailed,
    PositivityLost,
    RankDeficientBasis,
    StepTooCoarse,
    SurfaceNotFitted,
)
from .hedge import HedgePolicy, Setup, backtest, simulate_under_pa
from .market import (
    ChainModel,
    CountingChannel,
    MarketSpec,
    MarkLaw,
    Model,
    RiskPremiumModel,
    StateRates,
    simulate_truth,
)
from .value import compare_policies, value_quadratic

__version__ = "0.1.0"

__all__ = [
    "Affine", "BlowUp", "ChainModel", "ClaimSpec", "ConfigInvalid", "Constant", "CountingChannel",
    "FlowHedgeError", "GateClosed", "HedgePolicy", "IntensityBoundViolated", "LogLinear", "MarkLaw",
    "MarketSpec", "Model", "NegativeQueue", "NonInvertibleCoefficient", "PipelineFailed", "PositivityLost",
    "RankDeficientBasis", "RiskPremiumModel", "Setup", "StateRates", "StepTooCoarse", "SurfaceNotFitted",
    "backtest", "compare_policies", "constant_claim", "price_claim", "running_fee", "simulate_truth",
    "simulate_under_pa", "value_quadratic",
]
