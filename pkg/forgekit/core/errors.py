"""
Exception hierarchy shared by every forgekit module.

Each exception carries the process exit code the CLI reports for it:
0 ok, 1 usage/precondition, 2 I/O, 3 numerical failure.
"""


class ForgeError(Exception):
    """Base class for all forgekit failures."""

    exit_code: int = 1


class ConfigError(ForgeError):
    """Invalid, unknown or inconsistent configuration."""


class PreconditionError(ForgeError):
    """An operation was called outside its documented preconditions."""


class ShapeError(ForgeError, ValueError):
    """Tensor shapes do not match the configured scale."""


class GeometryError(ForgeError, ValueError):
    """Invalid geometric input, e.g. a non-unit quaternion."""


class CheckpointError(ForgeError):
    """Missing, corrupt or incompatible checkpoint."""


class DatasetIOError(ForgeError):
    """Reading or writing dataset, report or export files failed."""

    exit_code = 2


class NumericalError(ForgeError):
    """A loss or objective became non-finite."""

    exit_code = 3
