"""Exception hierarchy shared across pipeline stages.

Exit-code mapping lives in cli.main: ConfigError -> 1,
MissingArtifactError/ArtifactFormatError -> 2, NumericError -> 3.
"""


class HistofuseError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(HistofuseError):
    """Bad configuration file, unknown key, or invalid input data."""


class MissingArtifactError(HistofuseError):
    """A required upstream artifact does not exist."""


class ArtifactFormatError(MissingArtifactError):
    """Artifact exists but its magic header or layout is wrong."""


class NumericError(HistofuseError):
    """Non-finite loss, degenerate scatter, or other numeric failure."""
