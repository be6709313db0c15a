"""Group-robust training and evaluation of binary classifiers under subpopulation shift."""

from subpopdro.errors import ConfigError, DataError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "__version__"]
