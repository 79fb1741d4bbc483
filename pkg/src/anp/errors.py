"""Exception hierarchy.

Every error carries a short machine-readable ``code`` (kebab-case) so callers
and the CLI can map failures without string matching on messages.
"""


class AnpError(Exception):
    code = "anp-error"

    def __init__(self, message: str = "") -> None:
        super().__init__(message or self.code)


# identity
class IdentityError(AnpError):
    code = "identity-error"


class MalformedDidError(IdentityError):
    code = "malformed-did"


class UnsupportedMethodError(IdentityError):
    code = "unsupported-method"


class UnsupportedAlgorithmError(IdentityError):
    code = "unsupported-algorithm"


class KeyClassViolationError(IdentityError):
    code = "key-class-violation"


class FetchFailureError(IdentityError):
    code = "fetch-failure"


class DocumentIdMismatchError(IdentityError):
    code = "document-id-mismatch"


class InvalidDocumentError(IdentityError):
    code = "invalid-document"


# auth
class AuthError(AnpError):
    code = "auth-error"


class MalformedHeaderError(AuthError):
    code = "malformed-header"


class MalformedTokenError(AuthError):
    code = "malformed-token"


# e2e
class E2eError(AnpError):
    code = "e2e-error"


class NoKeyAgreementMethodError(E2eError):
    code = "no-key-agreement-method"


class BadHandshakeSignatureError(E2eError):
    code = "bad-handshake-signature"


class UnknownInitiatorKeyError(E2eError):
    code = "unknown-initiator-key"


class CounterExhaustedError(E2eError):
    code = "counter-exhausted"


class AuthFailureError(E2eError):
    code = "auth-failure"


class ReplayedSequenceError(E2eError):
    code = "replayed-sequence"


class SessionMismatchError(E2eError):
    code = "session-mismatch"


class MalformedEnvelopeError(E2eError):
    code = "malformed-envelope"


# description
class DescriptionError(AnpError):
    code = "description-error"


class DuplicateCapabilityNameError(DescriptionError):
    code = "duplicate-capability-name"


# metaproto
class NegotiationError(AnpError):
    code = "negotiation-error"


class EmptyCandidatesError(NegotiationError):
    code = "empty-candidates"


class MalformedMessageError(NegotiationError):
    code = "malformed-message"


class ProtocolViolationError(NegotiationError):
    code = "protocol-violation"


class NoHandlerRegisteredError(NegotiationError):
    code = "no-handler-registered"


# node
class NodeError(AnpError):
    code = "node-error"


class ConfigInvalidError(NodeError):
    code = "config-invalid"


class BindFailureError(NodeError):
    code = "bind-failure"


class DuplicateHostnameError(NodeError):
    code = "duplicate-hostname"


class SchemaViolationError(NodeError):
    code = "schema-violation"


class KeyStoreError(NodeError):
    code = "key-store-error"
