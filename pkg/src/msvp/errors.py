"""Exception types shared across the package.

The CLI maps these onto exit codes: config errors exit 1, data errors exit 2,
numerical aborts exit 3.
"""


class ConfigError(ValueError):
    """One or more configuration fields are invalid.

    ``problems`` holds every violated constraint found in a single pass.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


class DataError(RuntimeError):
    """Dataset files are missing or malformed."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class DimensionOverflowError(DataError):
    pass


class FileSizeError(DataError):
    pass


class NumericalAbort(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, epoch: int, step: int, value: float):
        self.epoch, self.step, self.value = epoch, step, value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")


class CheckpointError(RuntimeError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class RegistryMismatchError(CheckpointError):
    pass


class MissingGradientError(RuntimeError):
    pass


class UnsupportedArchitectureError(ValueError):
    pass
