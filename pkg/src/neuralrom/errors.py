"""Shared exception types."""


class NeuralRomError(Exception):
    """Base class for all package errors."""


class FormatError(NeuralRomError):
    """A file does not parse under its declared format."""


class ValidationError(NeuralRomError):
    """A constructed object violates one of its invariants."""


class DivergenceError(NeuralRomError):
    """A solve produced a non-finite energy.

    Attributes:
        iteration: descent iteration at which the energy became non-finite.
    """

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class CubatureDegeneracyError(NeuralRomError):
    """The sampled basis blocks do not span the latent space (Gram matrix not SPD)."""


class StaleFactorError(NeuralRomError):
    """A projection was requested against a factorization invalidated by a remesh."""
