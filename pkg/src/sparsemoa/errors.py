"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SmoaError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SmoaError):
    pass


# gateway


class GatewayError(SmoaError):
    """A model call failed. ``attempts`` counts outbound attempts made."""

    def __init__(self, message: str, attempts: int = 0) -> None:
        super().__init__(message)
        self.attempts = attempts


class TransportError(GatewayError):
    pass


class ProviderError(GatewayError):
    def __init__(self, message: str, status: int | None = None, body: str = "", attempts: int = 0) -> None:
        super().__init__(message, attempts)
        self.status = status
        self.body = body


class AuthError(GatewayError):
    pass


class EndpointNotConfigured(ConfigError):
    pass


# prompts


class PromptError(SmoaError):
    pass


class EmptyResponses(PromptError):
    pass


class BadK(PromptError):
    pass


class MissingPlaceholder(PromptError):
    pass


class UnparseableVerdict(PromptError):
    pass


class RoleCountMismatch(PromptError):
    def __init__(self, expected: int, found: int) -> None:
        super().__init__(f"expected {expected} role descriptions, found {found}")
        self.expected = expected
        self.found = found


# engine / baselines


class LayerFailed(SmoaError):
    def __init__(self, layer_index: int) -> None:
        super().__init__(f"every proposer failed or returned empty text in layer {layer_index}")
        self.layer_index = layer_index


class RunFailed(SmoaError):
    pass


# harness


class SchemaError(SmoaError):
    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class GradeParseError(SmoaError):
    pass


# ledger


class DuplicateEvent(SmoaError):
    pass


class UnknownEndpoint(SmoaError):
    """Raised when pricing a usage record whose endpoint has no price entry."""
