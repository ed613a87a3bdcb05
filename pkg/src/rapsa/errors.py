"""Exception types raised across the package."""


class RapsaError(Exception):
    """Base class for all errors raised by :mod:`rapsa`."""


class ConfigurationError(RapsaError, ValueError):
    """Invalid block layout, schedule, or experiment configuration."""


class EmptyDatasetError(RapsaError, ValueError):
    pass


class DimensionError(RapsaError, ValueError):
    pass


class RankDeficiencyError(RapsaError, ArithmeticError):
    pass


class PreconditionError(RapsaError, ValueError):
    """A bound was requested outside the region where it is valid."""


class DivergenceError(RapsaError, FloatingPointError):
    """An iterate became non-finite or the objective blew up.

    Carries the iteration index, step size and block (when known) so the
    failing update can be reproduced.
    """

    def __init__(self, message, t=None, step=None, block=None):
        super().__init__(message)
        self.t = t
        self.step = step
        self.block = block


class StallError(RapsaError, RuntimeError):
    pass


class IdxFormatError(RapsaError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TraceFormatError(RapsaError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
