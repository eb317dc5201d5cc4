class DataError(ValueError):
    """Malformed or insufficient input data."""


class FormatError(ValueError):
    """A binary artifact (checkpoint, embedding file) failed validation."""


class MismatchError(ValueError):
    """Two artifacts disagree, e.g. checkpoint K versus label space K."""


class NumericalError(ArithmeticError):
    """Non-finite loss, logits or parameters."""
