# utils/errors.py

"""
Exception hierarchy shared by every package of the pipeline.

Library code raises these; `main.py` catches `WaveAttackError` at the command
boundary and exits with the exception's `exit_code` (0 success, 1 anything
unexpected, 2 configuration, 3 missing or stale artifact, 4 numeric). Each
exception carries a plain message naming the offending parameter or path.
"""


class WaveAttackError(Exception):
    """Base class for all errors raised by this project."""
    exit_code = 1


class InvalidDomainError(WaveAttackError):
    """Degenerate rectangle or mesh request."""
    exit_code = 2


class InvalidParameterError(WaveAttackError):
    """A scalar parameter is outside its admissible range."""
    exit_code = 2


class InvalidInputError(WaveAttackError):
    """Array shapes or lengths do not match the operator they are applied to."""
    exit_code = 2


class OutOfDomainError(WaveAttackError):
    """A point lies outside the meshed rectangle."""
    exit_code = 2


class ConfigError(WaveAttackError):
    """The pipeline configuration could not be parsed or validated."""
    exit_code = 2


class MissingArtifactError(WaveAttackError):
    """An upstream artifact (mesh, Green operator, model, ...) is not on disk."""
    exit_code = 3


class ArtifactMismatchError(WaveAttackError):
    """An artifact was produced under a different configuration hash or has a bad header."""
    exit_code = 3


class NumericError(WaveAttackError):
    """A linear solve failed or a non-finite value appeared."""
    exit_code = 4


class EmptyNullspaceError(NumericError):
    """The frequency constraint only admits the zero signal."""


class SingleClassDatasetError(InvalidInputError):
    """Training needs both labels present."""

