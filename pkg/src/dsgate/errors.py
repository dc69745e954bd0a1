"""Exception hierarchy shared across the gateway.

Every error that can surface through the HTTP layer carries enough context
for the gateway to map it to a status code without string matching.
"""

from __future__ import annotations


class GatewayError(Exception):
    """Base class for all gateway errors."""


# --- document / model validation ---------------------------------------------

class MalformedDocument(GatewayError):
    """Input is not parseable JSON."""


class SchemaViolation(GatewayError):
    """Document parsed but violates the project/config schema."""


class TemplateMismatch(GatewayError):
    """Declared bind variables disagree with those extracted from the template."""


# --- template scanning / substitution ----------------------------------------

class UnbalancedDelimiter(GatewayError):
    """Template contains an odd number of unescaped dollar signs."""


class IllegalName(GatewayError):
    """A placeholder name is empty or not a legal identifier."""


class MissingParameter(GatewayError):
    """A required bind variable has no supplied value and no default."""

    def __init__(self, name: str):
        super().__init__(f"missing required parameter: {name}")
        self.name = name


class UndeclaredParameter(GatewayError):
    """Caller supplied a parameter the template does not declare."""

    def __init__(self, name: str):
        super().__init__(f"parameter not declared by template: {name}")
        self.name = name


class TypeMismatch(GatewayError):
    """Value does not satisfy the bind variable's type hint."""


# --- provider SPI -------------------------------------------------------------

class DuplicateProviderId(GatewayError):
    """A provider with this id is already registered."""


class UnknownProvider(GatewayError):
    """providerId does not resolve to a registered provider."""


class ConnectionRefused(GatewayError):
    """Backend refused or cannot accept the connection."""


class AuthenticationFailed(GatewayError):
    """Backend rejected the connection credentials."""


class InvalidDescriptor(GatewayError):
    """Connection descriptor is missing or carries illegal properties."""


class QueryError(GatewayError):
    """Backend rejected the query; message passed through from the backend."""


class ExecutionTimeout(GatewayError):
    """Endpoint execution exceeded its configured timeout."""


class ConnectionLost(GatewayError):
    """Connection to the backend dropped mid-execution."""


# --- modifier engine ----------------------------------------------------------

class ModifierRejected(GatewayError):
    """A modifier vetoed the request (surfaces as HTTP 403)."""


class ModifierFailure(GatewayError):
    """A modifier failed internally (surfaces as HTTP 500)."""


class ChainDepthExceeded(ModifierFailure):
    """Output chaining exceeded the configured maximum depth."""


class TargetNotFound(ModifierFailure):
    """Output chainer's target endpoint does not exist."""


# --- security -----------------------------------------------------------------

class AuthError(GatewayError):
    """Base for credential failures; all map to HTTP 401."""


class MissingCredential(AuthError):
    """No credential presented."""


class InvalidCredential(AuthError):
    """Credential unknown or signature invalid."""


class ExpiredCredential(AuthError):
    """Credential past its expiry."""


class RevokedCredential(AuthError):
    """Credential explicitly revoked."""


class NoSigningKey(GatewayError):
    """Token issuance requested but no signing keypair configured."""


class Forbidden(GatewayError):
    """Authenticated principal lacks the role for this action."""


# --- persistence --------------------------------------------------------------

class NotFound(GatewayError):
    """Requested record or route does not exist."""


class StorageFull(GatewayError):
    """Persistent store cannot accept more data."""


# --- gateway ------------------------------------------------------------------

class MethodMismatch(GatewayError):
    """HTTP verb disagrees with the endpoint kind segment (HTTP 405)."""


class PortInUse(GatewayError):
    """A listener port is already bound."""
