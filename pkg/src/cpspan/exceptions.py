"""Exception hierarchy."""


class CPSPANError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CPSPANError, ValueError):
    """An argument violates an operation's precondition."""


class ParseError(CPSPANError, ValueError):
    """A CSV input could not be parsed.

    Carries the offending file name and (1-based) row number when known.
    """

    def __init__(self, message, path=None, row=None):
        self.path = None if path is None else str(path)
        self.row = row
        where = []
        if self.path is not None:
            where.append(self.path)
        if row is not None:
            where.append(f"row {row}")
        if where:
            message = f"{': '.join([', '.join(where), message])}"
        super().__init__(message)


class DimensionMismatchError(ParseError):
    pass


class NonBinaryMaskError(ParseError):
    pass


class UnreadableFileError(ParseError):
    pass


class TrainingDivergenceError(CPSPANError, RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, tensor=None, epoch=None):
        self.tensor = tensor
        self.epoch = epoch
        super().__init__(message)


class DegenerateEmbeddingError(CPSPANError, ValueError):
    """An embedding row has (numerically) zero norm, so cosine is undefined."""

    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message)


class ImputationInfeasibleError(CPSPANError, RuntimeError):
    """No donor pool exists for a missing cell."""


class StageError(CPSPANError, RuntimeError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
