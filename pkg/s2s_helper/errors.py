class S2SHelperError(Exception):
    """Base class of every error raised by s2s_helper."""


class DomainError(S2SHelperError, ValueError):
    """A date or argument lies outside the domain of an operation."""


class DatasetFormatError(S2SHelperError, ValueError):
    """A dataset file does not follow its CSV schema."""


class EmptyWindowError(S2SHelperError, ValueError):
    """A training window, sample or base period selected no data."""


class MissingDataError(S2SHelperError, KeyError):
    """Forecast entries or regressors required by an operation are absent."""

    def __init__(self, message: str, missing: list | None = None):
        super().__init__(message)
        self.missing: list = list(missing or [])

    def __str__(self) -> str:
        return self.args[0]


class LeakageError(S2SHelperError, RuntimeError):
    """A datum not observable at forecast issuance was requested."""


class ConfigError(S2SHelperError, ValueError):
    """The run configuration is invalid."""
