"""Exception hierarchy shared by all volreg modules.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class VolregError(Exception):
    """Base class for all volreg errors."""


class ConfigError(VolregError):
    """Malformed configuration: unknown keys, invalid values, bad CLI usage."""


class DataError(VolregError):
    """Bad or inconsistent data: missing files, dims mismatches, invalid headers."""


class NumericError(VolregError):
    """Numeric failure: non-finite values where finite ones are required."""


class PlacementError(DataError):
    """Point placement for DVF simulation failed within the attempt budget."""
