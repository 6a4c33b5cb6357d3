"""Exception hierarchy shared by every feddtg module."""

from __future__ import annotations


class FedDTGError(Exception):
    """Base class for all errors raised by feddtg."""


class DimensionError(FedDTGError, ValueError):
    """An array did not have the shape an operation requires."""

    def __init__(self, what: str, expected, found):
        self.what = what
        self.expected = expected
        self.found = found
        super().__init__(f"{what}: expected {expected}, found {found}")


class ParameterError(FedDTGError, ValueError):
    """A scalar argument was outside its valid range."""


class LayoutError(FedDTGError, ValueError):
    """Two parameter vectors do not share a network layout."""


class FormatError(FedDTGError, ValueError):
    """A binary file did not follow the expected container format."""


class IdxMagicError(FormatError):
    def __init__(self, expected: int, found: int):
        self.expected = expected
        self.found = found
        super().__init__(f"bad IDX magic: expected 0x{expected:08x}, found 0x{found:08x}")


class IdxLengthError(FormatError):
    def __init__(self, expected: int, found: int):
        self.expected = expected
        self.found = found
        super().__init__(f"IDX payload length mismatch: expected {expected} bytes, found {found}")


class ProtocolError(FedDTGError, RuntimeError):
    """The federated protocol was driven into an invalid state."""


class RoundError(FedDTGError, RuntimeError):
    """A communication round failed; ``stage`` names the stage that raised."""

    def __init__(self, round_index: int, stage: str, cause: Exception):
        self.round_index = round_index
        self.stage = stage
        self.cause = cause
        super().__init__(f"round {round_index} failed in stage '{stage}': {cause}")


class ConfigError(FedDTGError, ValueError):
    """A run configuration failed validation.

    ``errors`` lists one message per violated field.
    """

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class CheckpointError(FedDTGError, ValueError):
    """A checkpoint file is missing, truncated or of an unknown version."""
