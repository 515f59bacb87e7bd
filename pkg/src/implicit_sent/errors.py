"""Exception types shared across the toolkit.

The CLI maps each family onto an exit code: configuration problems exit 1,
data problems exit 2 and numeric/training failures exit 3.
"""


class ImplicitSentError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigError(ImplicitSentError, ValueError):
    """Invalid hyperparameter, flag or config file entry."""


class ContractError(ImplicitSentError, ValueError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible with the operation."""


class TapeReuseError(ImplicitSentError, RuntimeError):
    """A tape that already ran a backward pass was used again."""


class NumericError(ImplicitSentError, ArithmeticError):
    """NaN or otherwise unusable floating-point values were encountered."""


class ParseError(ImplicitSentError, ValueError):
    """Malformed input file content."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class TrainingError(ImplicitSentError, RuntimeError):
    """Training diverged or aborted.

    ``epoch`` and ``batch`` locate the failure; ``partial`` carries any
    results that completed before it (used by replicate runs).
    """

    def __init__(self, message, epoch=None, batch=None, partial=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.partial = list(partial) if partial else []
