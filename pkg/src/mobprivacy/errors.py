"""Exception hierarchy. The CLI maps each class onto a process exit code."""


class MobPrivacyError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MobPrivacyError, ValueError):
    """Invalid configuration or arguments."""

    exit_code = 2


class DataError(MobPrivacyError, ValueError):
    """Input data is missing, malformed, or filtered down to nothing."""

    exit_code = 2


class NumericalError(MobPrivacyError, ArithmeticError):
    """A loss, gradient or activation became non-finite."""

    exit_code = 3


class ArtifactMismatchError(MobPrivacyError):
    """Checkpoint, vocabulary or input files were produced by incompatible runs."""

    exit_code = 4
