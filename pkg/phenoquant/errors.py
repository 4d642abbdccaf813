# Warnings
class MalformedRecordWarning(Warning):
    """
    A record in an input table could not be parsed.
    The record is skipped and counted in the tally of the operation.
    """


class DegenerateFeatureWarning(Warning):
    """
    A continuous feature has zero variance over the training corpus.
    It is centred but not scaled.
    """


class UnusableIQRWarning(Warning):
    """The quantile curves nearly touch, the anomaly score is not defined there"""


# Exceptions
class PhenoquantError(Exception):
    """Base class for all errors raised by this library"""


class DomainError(PhenoquantError, ValueError):
    """An argument lies outside the domain of the operation"""


class EmptyInputError(PhenoquantError, ValueError):
    """An operation that needs data was handed none"""


class MissingFeatureError(PhenoquantError):
    """A continuous feature has no observed value anywhere in the corpus

    :param feature: :class:`str` Name of the offending feature
    """
    def __init__(self, feature: str):
        super().__init__(f"Feature {feature!r} is missing for every record of the corpus")
        self.feature = feature


class ShapeMismatchError(PhenoquantError, ValueError):
    """Array shapes disagree with the declared network architecture"""


class NonFiniteError(PhenoquantError, ArithmeticError):
    """A loss or gradient became NaN or infinite during training

    :param batch_id: :class:`int|None` The batch in which this happened
    :param diagnostics: :class:`dict` Names of offending arrays and their bad entry counts
    """
    def __init__(self, message: str, *, batch_id: int|None=None, diagnostics: dict|None=None):
        super().__init__(message if batch_id is None else f"{message} (batch {batch_id})")
        self.batch_id = batch_id
        self.diagnostics = diagnostics or {}


class CheckpointError(PhenoquantError):
    """A checkpoint document could not be decoded"""


class SchemaVersionError(CheckpointError):
    """The checkpoint or table was written with an unsupported schema version"""


class DimensionMismatchError(CheckpointError):
    """The checkpoint does not fit the features it is applied to"""


class MissingColumnsError(PhenoquantError):
    """An input table lacks required columns

    :param missing: :class:`tuple[str, ...]` The absent column names
    """
    def __init__(self, source: str, missing: tuple[str, ...]):
        super().__init__(f"{source} is missing columns: {', '.join(missing)}")
        self.missing = missing


class DivergenceError(NonFiniteError):
    """The training loss grew far beyond the best value seen so far"""


class ConfigurationError(PhenoquantError, ValueError):
    """A command line option or configuration entry is invalid"""
