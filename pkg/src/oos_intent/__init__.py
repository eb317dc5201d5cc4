"""(K+1)-way out-of-scope intent detection with pseudo outliers."""

from oos_intent.errors import DataError, FormatError, MismatchError, NumericalError

__version__ = "0.1.0"

__all__ = ["DataError", "FormatError", "MismatchError", "NumericalError", "__version__"]
