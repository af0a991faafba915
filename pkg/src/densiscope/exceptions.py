"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not match what an operation requires."""


class GenerationError(RuntimeError):
    """Phantom generation could not produce a valid slice."""


class NumericsError(RuntimeError):
    """A numeric invariant broke (non-finite gradient or loss)."""


class TrainingDivergedError(NumericsError):
    """Training produced a non-finite loss."""


class WeightsFormatError(RuntimeError):
    """Weights file is corrupt, truncated, or has the wrong version."""


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined (zero rank variance in an input)."""


class ConfigError(ValueError):
    """Run configuration is invalid."""
