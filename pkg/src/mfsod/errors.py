"""Exception types shared across the package.

The CLI maps these onto process exit codes, so each class carries one.
"""


class MfsodError(Exception):
    exit_code = 1


class ConfigError(MfsodError, ValueError):
    """Invalid configuration, unknown variant, missing dataset layout."""

    exit_code = 2


class InputError(MfsodError, ValueError):
    """Tensor shape, channel or divisibility violation."""

    exit_code = 2


class StateError(MfsodError, RuntimeError):
    """An operation was called before its prerequisites were computed."""

    exit_code = 2


class CheckpointError(MfsodError):
    exit_code = 3


class NumericalError(MfsodError, FloatingPointError):
    exit_code = 4
