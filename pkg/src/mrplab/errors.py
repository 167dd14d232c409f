"""Exception hierarchy shared by every mrplab module."""


class MrpLabError(Exception):
    """Base class for all library errors."""


class InvalidInputError(MrpLabError, ValueError):
    pass


class DegenerateSubspaceError(MrpLabError):
    """Raised when a sample set leaves no usable direction to project out."""


class UndefinedSimilarityError(MrpLabError, ValueError):
    pass


class NumericOverflowError(MrpLabError, FloatingPointError):
    pass


class RankCollapseError(MrpLabError):
    pass


class CapacityError(MrpLabError, ValueError):
    pass


class ParseError(MrpLabError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidLayerError(MrpLabError, ValueError):
    pass


class UndefinedScoreError(MrpLabError, ValueError):
    pass


class TrainingFailure(MrpLabError):
    """Pretraining stopped at the epoch budget without reaching its target."""

    def __init__(self, message: str, report: dict | None = None):
        self.report = report or {}
        super().__init__(message)


class ConfigError(MrpLabError, ValueError):
    """Missing or invalid configuration key; message names the key path."""
