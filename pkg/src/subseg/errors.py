"""Exception hierarchy.

Every error carries an ``exit_code`` so the command-line driver can map it
without a lookup table: 1 for validation problems (bad config, bad
arguments), 2 for data problems (missing or malformed inputs).
"""


class SubsegError(Exception):
    exit_code = 2


class ValidationError(SubsegError, ValueError):
    exit_code = 1


class ConfigError(ValidationError):
    pass


class DataError(SubsegError):
    exit_code = 2


class FormatError(DataError, ValueError):
    pass


class UnsupportedTypeError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class RankError(FormatError):
    pass


class ShapeError(DataError, ValueError):
    pass


class DomainError(DataError, ValueError):
    pass


class MissingModalityError(DataError):
    def __init__(self, missing, case_id=""):
        self.missing = sorted(missing)
        where = f" for case {case_id!r}" if case_id else ""
        super().__init__(f"missing modality{where}: {', '.join(self.missing)}")


class EmptySplitError(ValidationError):
    pass


class ParseError(DataError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LengthError(ParseError):
    pass


class FusionError(DataError, ValueError):
    pass


class EmptyAggregateError(DataError, ValueError):
    pass


class IncomparableRunsError(DataError, ValueError):
    def __init__(self, n_diff):
        self.n_diff = n_diff
        super().__init__(
            f"runs cover different sample keys (symmetric difference: {n_diff})"
        )
