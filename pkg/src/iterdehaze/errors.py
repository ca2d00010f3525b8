"""Exception types shared across the package.

Shape/parameter/config problems are reported through these instead of bare
ValueError so the CLI can map them onto stable exit codes.
"""


class IterdehazeError(Exception):
    """Base class for all package errors."""


class ShapeError(IterdehazeError):
    """Operands have incompatible shapes (channel counts, spatial dims, ...)."""


class ParameterError(IterdehazeError):
    """A numeric argument is outside its documented domain."""


class ConfigError(IterdehazeError):
    """A configuration value is structurally invalid (e.g. groups not dividing C)."""


class ContractError(IterdehazeError):
    """An API contract was violated (backward on non-scalar, step without grads, ...)."""


class CheckpointError(IterdehazeError):
    """A checkpoint file is malformed, or its version/fingerprint does not match."""


class ImageFormatError(IterdehazeError):
    """A PPM/PGM stream is malformed.  Carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
