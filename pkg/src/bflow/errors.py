"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised when an argument violates a shape or divisibility constraint."""


class SingularFactorError(ArithmeticError):
    """Raised when a butterfly factor with a zero pair determinant is inverted."""

    def __init__(self, message, pair_index=None):
        super().__init__(message)
        self.pair_index = pair_index


class NonFiniteLossError(ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class NonFiniteGradientError(ArithmeticError):
    pass


class CorruptCheckpointError(ValueError):
    pass


class ShapeMismatchError(InvalidArgumentError):
    """Array or checkpoint shapes disagree with the model."""
