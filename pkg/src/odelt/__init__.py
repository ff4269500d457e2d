"""Flow matching with a depth-adaptive, length-conditioned residual field."""

from .netcore import LengthField, NetConfig, count_active_cost, init_params
from .paths import PathSpec, TimeDist, interpolate, sample_time

__version__ = "0.1.0"

__all__ = [
    "LengthField",
    "NetConfig",
    "PathSpec",
    "TimeDist",
    "count_active_cost",
    "init_params",
    "interpolate",
    "sample_time",
]
