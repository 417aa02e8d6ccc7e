"""Exception hierarchy used across the fabric."""


class FabricError(Exception):
    """Base class for all fedfabric errors."""


class RetriableError(FabricError):
    """Transient failure; the caller may retry."""


class PermanentError(FabricError):
    """Failure that will not go away on retry."""


class StoreUnavailableError(RetriableError):
    pass


class CapacityExceededError(PermanentError):
    pass


class NotFoundError(FabricError, LookupError):
    pass


class IntegrityError(FabricError):
    """Resolved bytes do not match the reference digest."""


class TransferError(FabricError):
    """Wide-area transfer failed after all retries."""


class RestoreError(FabricError):
    def __init__(self, field: str, cause: Exception):
        super().__init__(f"failed to restore field {field!r}: {cause}")
        self.field = field
        self.cause = cause


class ProxyAbortedError(FabricError):
    """scan_and_proxy failed part way; ``stored`` lists what had been written."""

    def __init__(self, field: str, cause: Exception, stored: list):
        super().__init__(f"failed to proxy field {field!r}: {cause}")
        self.field = field
        self.cause = cause
        self.stored = stored


class RelayError(FabricError):
    code = "relay-error"


class PayloadTooLargeError(RelayError, PermanentError):
    code = "payload-too-large"


class UnknownFunctionError(RelayError):
    code = "unknown-function"


class UnknownTaskError(RelayError):
    code = "unknown-task"


class AuthError(RelayError):
    code = "auth"


class RelayUnavailableError(RetriableError, ConnectionError):
    """Relay could not be reached or dropped the connection."""


class SubmissionError(FabricError):
    """Relay rejected a task submitted on ``topic``."""

    def __init__(self, topic: str, cause: Exception):
        super().__init__(f"topic {topic!r}: {cause}")
        self.topic = topic
        self.cause = cause


class ConfigError(FabricError, ValueError):
    pass


RELAY_ERRORS = {
    cls.code: cls
    for cls in (RelayError, PayloadTooLargeError, UnknownFunctionError, UnknownTaskError, AuthError)
}
