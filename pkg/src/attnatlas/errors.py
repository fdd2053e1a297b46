"""Exception types. The CLI maps each family to an exit code."""


class AtlasError(Exception):
    pass


class DataError(AtlasError, ValueError):
    """Bad input data: malformed files, out-of-range indices, empty sets."""


class ShapeError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericalError(AtlasError, ArithmeticError):
    """Non-finite values during training or optimisation."""
