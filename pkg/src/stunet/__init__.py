"""Graph-structured time-series forecasting with a U-shaped recurrent network."""

from .errors import StunetError

__version__ = "0.1.0"

__all__ = ["StunetError", "__version__"]
