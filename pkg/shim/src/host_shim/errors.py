class ShimError(Exception):
    """Base class for everything this package raises on purpose."""


class ProtocolError(ShimError):
    """The kernel answered with bytes we cannot make sense of."""


class KernelStatusError(ShimError):
    """The kernel rejected a request (non-zero status)."""

    def __init__(self, status: int, message: str = ""):
        super().__init__(message or f"kernel returned status {status}")
        self.status = status


class ConnectionLost(ShimError):
    """The serve session closed underneath us."""


class TokenBudgetExceeded(ShimError):
    """More prompt tokens than the attention sites were sized for."""


class UnmappableToken(ShimError):
    """A tokenizer piece could not be located in the plain text."""


class ModelUnavailable(ShimError):
    """No local weights for the requested embedding model."""


class PromptSyntaxError(ShimError):
    """Malformed {text: TAG} markup in an annotated prompt."""
