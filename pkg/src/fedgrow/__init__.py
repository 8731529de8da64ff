"""fedgrow: a federated-learning simulator with staged model growing.

Training starts from a small model and switches to progressively larger
ones through function-preserving transforms once a windowed-loss policy
detects saturation, with exact per-round accounting of communication
and client computation against full-broadcast and federated-dropout
baselines.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataFormatError, FedgrowError,
                     NumericalError, ScheduleError, TransformError)

__all__ = [
    "__version__",
    "FedgrowError", "ConfigError", "ScheduleError", "TransformError",
    "NumericalError", "DataFormatError",
]
