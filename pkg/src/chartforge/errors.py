"""Exception hierarchy shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all chartforge errors."""


class InvalidInputError(PipelineError, ValueError):
    """Caller handed an operation data that violates its preconditions."""


class TransportError(PipelineError):
    """Endpoint kept failing after the retry budget was spent."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class AuthError(TransportError):
    """401/403 from an endpoint; never retried."""


class GatewayProtocolError(PipelineError):
    """Endpoint answered, but the body did not match the wire protocol."""


class MockScriptGapError(PipelineError):
    """Strict mock received a request no script rule matches."""


class BrokerUnavailableError(PipelineError):
    """Task submitted after the worker pool was shut down."""


class ExecutionFailedError(PipelineError):
    """A render/script task finished with a non-ok status."""

    def __init__(self, message: str, status: str, stderr_tail: str = ""):
        super().__init__(message)
        self.status = status
        self.stderr_tail = stderr_tail


class WorkerProtocolError(PipelineError):
    """A worker response violated the task contract (e.g. empty output on ok)."""


class SynthesisParseError(PipelineError):
    """A completion was missing the tags the stage prompt mandates."""


class ManifestError(PipelineError):
    """Run manifest failed validation; message names the offending field."""


class LedgerError(PipelineError):
    """Run ledger is corrupt or internally inconsistent."""
