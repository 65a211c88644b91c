"""Exception hierarchy shared by every fcpn module."""


class FCPNError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FCPNError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(FCPNError, ValueError):
    """A layer or model was configured with inconsistent hyperparameters."""


class InputError(FCPNError, ValueError):
    """Input data violates an operation precondition."""


class ParseError(FCPNError, ValueError):
    """A file could not be parsed; the message names the line or byte offset."""


class UnsupportedFormatError(FCPNError, ValueError):
    """A file is well-formed but uses features this package does not read."""


class CorruptFileError(FCPNError, ValueError):
    """A binary artifact (checkpoint or FCVX grid) is truncated or has a bad magic."""


class DivergenceError(FCPNError, RuntimeError):
    """Training produced a non-finite loss.

    ``last_checkpoint`` holds the path of the last checkpoint written before
    divergence, or ``None`` if no checkpoint had been written yet.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
