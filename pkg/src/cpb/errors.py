"""Exception hierarchy shared by the pipeline and the CLI exit-code mapping."""


class CPBError(Exception):
    exit_code = 1


class ConfigError(CPBError, ValueError):
    """Invalid parameters or an unusable configuration."""

    exit_code = 1


class DataError(CPBError):
    """Input data that cannot be used (unreadable file, empty range, ...)."""

    exit_code = 2


class MalformedLine(DataError, ValueError):
    """A single log line could not be parsed; callers may count and continue."""


class ProtocolError(CPBError):
    """Violation of the STA round protocol (duplicate upload, bad version, ...)."""

    exit_code = 3
