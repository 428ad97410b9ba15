"""Kyle cross-impact models for universes of underlyings and derivatives."""

__version__ = "0.1.0"

from .errors import CrossImpactError, DataError, NumericalError
from .instruments import Instrument, Kind, MarketState, Universe, VolFactorModel
from .kyle import FlowCov, ImpactMatrix, KyleParams, assemble_full, kyle_lambda

__all__ = [
    "CrossImpactError",
    "DataError",
    "NumericalError",
    "Instrument",
    "Kind",
    "MarketState",
    "Universe",
    "VolFactorModel",
    "FlowCov",
    "ImpactMatrix",
    "KyleParams",
    "assemble_full",
    "kyle_lambda",
]
