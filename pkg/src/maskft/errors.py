"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
NumericsError -> 2, CheckpointError (and plain I/O failures) -> 3.
"""


class ConfigError(Exception):
    """Invalid run specification, flag combination, or config field."""


class NumericsError(Exception):
    """Training diverged or produced non-finite values."""


class CheckpointError(Exception):
    """Checkpoint file is malformed, corrupt, or version-incompatible."""
