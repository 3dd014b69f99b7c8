"""Exception hierarchy shared across the toolkit."""


class TireidError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(TireidError):
    """Invalid input data, arguments, or configuration."""


class FormatError(TireidError):
    """Malformed file content: bad magic, truncation, broken JSON."""


class OracleError(TireidError):
    """Base class for oracle backend failures."""


class ProtocolError(OracleError):
    """Oracle reply that cannot be parsed in the requested format.

    Carries the raw reply so callers can log exactly what came back;
    verdicts are never fabricated from unparseable replies.
    """

    def __init__(self, message: str, raw_reply: str | None = None):
        super().__init__(message)
        self.raw_reply = raw_reply


class TransportError(OracleError):
    """Wire request failed after the configured retries."""


class ScriptExhaustedError(OracleError):
    """Scripted backend ran out of replies (test-harness error)."""


class UnsupportedOperationError(OracleError):
    """Operation not available on this backend."""
