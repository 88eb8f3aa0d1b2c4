"""Exception taxonomy.

Exceptions map onto CLI exit codes: validation problems exit with 2,
numerical failures with 3, and file/format problems with 4.
"""


class BaescanError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(BaescanError):
    """Invalid argument, configuration value, or input data."""


class ConfigurationError(ValidationError):
    """Configuration file is malformed or inconsistent with the artifacts."""


class ResolutionError(ValidationError):
    """A mesh resolution target cannot be met within tolerance."""


class DegenerateSignalError(ValidationError):
    """A finite SNR was requested for an identically zero signal."""


class NumericalError(BaescanError):
    """A numerical computation failed or produced an unusable result."""


class SingularSystemError(NumericalError):
    """A linear system that must be solvable is singular."""


class DegenerateStatisticsError(NumericalError):
    """Error statistics are too degenerate for the requested operation."""


class FileFormatError(BaescanError):
    """An artifact file has a bad magic number, version, or structure."""
