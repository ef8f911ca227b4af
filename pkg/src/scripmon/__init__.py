"""Scrip-token incentives for decentralised norm monitoring: simulator and analysis tools."""
from .core import (
    DistributionVector,
    GameParams,
    PaymentVariant,
    RandomStream,
    RoundOutcome,
    Setting,
    TokenLedger,
    uniform_choice,
    validate_params,
)
from .errors import ScripError

__all__ = [
    "DistributionVector", "GameParams", "PaymentVariant", "RandomStream", "RoundOutcome",
    "ScripError", "Setting", "TokenLedger", "uniform_choice", "validate_params",
]
__version__ = "0.1.0"
