"""DID-signed HTTP requests, bearer tokens and the human-authorization gate.

First request::

    Authorization: WBA did="did:wba:a.com:agents:x",key="key-1",ts=1700000000,nonce="<32 hex>",sig="<b64url>"

The signature covers the UTF-8 payload::

    wba-auth.v1\\n<did>\\n<key_id>\\n<ts>\\n<nonce>\\n<METHOD>\\n<normalized url>

The server answers with a token (``Authorization: Bearer <token>`` afterwards).
High-risk routes additionally need a ``Human-Authorization`` header signed by a
``humanAuthorization`` key of the requester (same syntax, with ``route=``).
"""

from __future__ import annotations

import enum
import json
import re
import secrets
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping
from urllib.parse import urlsplit, urlunsplit

from anp.clock import Clock, system_clock
from anp.encoding import b64url_decode, b64url_encode, canonical_json
from anp.errors import AnpError, MalformedHeaderError, MalformedTokenError
from anp.identity import DidDocument, DidId, KeyPair, Purpose, parse_did, verify_signature

PAYLOAD_LABEL = "wba-auth.v1"
HUMAN_PAYLOAD_LABEL = "wba-human.v1"
TOKEN_LABEL = b"wba-token.v1\n"
SKEW_WINDOW = 300
DEFAULT_TOKEN_TTL = 300

HUMAN_AUTHORIZATION_HEADER = "Human-Authorization"
TOKEN_HEADER = "ANP-Token"

# rejection reasons
BAD_SIGNATURE = "bad-signature"
EXPIRED_TIMESTAMP = "expired-timestamp"
REPLAYED_NONCE = "replayed-nonce"
UNKNOWN_KEY = "unknown-key"
RESOLUTION_FAILURE = "resolution-failure"
KEY_PURPOSE_MISMATCH = "key-purpose-mismatch"
MALFORMED_HEADER = "malformed-header"
EXPIRED = "expired"
UNKNOWN_ISSUER_KEY = "unknown-issuer-key"
MALFORMED_TOKEN = "malformed-token"
HUMAN_CONFIRMATION_ABSENT = "human-confirmation-absent"
HUMAN_SIGNATURE_INVALID = "human-signature-invalid"

_DEFAULT_PORTS = {"https": 443, "http": 80}
_NONCE_RE = re.compile(r"^[0-9a-f]{32}$")
_PARAM_RE = re.compile(r'([a-z]+)=(?:"([^"\\]*)"|([0-9]+))')


def normalize_url(url: str) -> str:
    """Lowercase scheme and host, drop default ports, default the path to ``/``."""
    parts = urlsplit(url)
    scheme = parts.scheme.lower()
    host = (parts.hostname or "").lower()
    port = parts.port
    netloc = host if port is None or _DEFAULT_PORTS.get(scheme) == port else f"{host}:{port}"
    return urlunsplit((scheme, netloc, parts.path or "/", parts.query, ""))


def signing_payload(did: str, key_id: str, timestamp: int, nonce: str, method: str, url: str) -> bytes:
    return "\n".join(
        (PAYLOAD_LABEL, did, key_id, str(timestamp), nonce, method.upper(), normalize_url(url))
    ).encode("utf-8")


def _parse_params(value: str, scheme: str, names: tuple[str, ...], numeric: set[str]) -> dict[str, str]:
    prefix = scheme + " "
    if not value.startswith(prefix):
        raise MalformedHeaderError(f"expected {scheme} credentials")
    body = value[len(prefix):]
    params: dict[str, str] = {}
    pos = 0
    while pos < len(body):
        m = _PARAM_RE.match(body, pos)
        if not m:
            raise MalformedHeaderError("unparseable parameter list")
        name, quoted, number = m.groups()
        if name in params or name not in names:
            raise MalformedHeaderError(f"unexpected parameter {name!r}")
        if (name in numeric) != (number is not None):
            raise MalformedHeaderError(f"parameter {name!r} has the wrong form")
        params[name] = number if number is not None else quoted
        pos = m.end()
        if pos < len(body):
            if body[pos] != ",":
                raise MalformedHeaderError("parameters must be comma separated")
            pos += 1
            if pos == len(body):
                raise MalformedHeaderError("trailing comma")
    if set(params) != set(names):
        raise MalformedHeaderError("missing parameters")
    return params


def _parse_did_strict(text: str) -> DidId:
    try:
        did = parse_did(text)
    except AnpError as exc:
        raise MalformedHeaderError(f"bad DID: {exc}") from exc
    if str(did) != text:
        raise MalformedHeaderError("DID not in canonical form")
    return did


def _parse_sig(text: str) -> bytes:
    try:
        sig = b64url_decode(text)
    except ValueError as exc:
        raise MalformedHeaderError("bad signature encoding") from exc
    if len(sig) != 64:
        raise MalformedHeaderError("signature must be 64 bytes")
    return sig


@dataclass(frozen=True)
class AuthHeader:
    did: DidId
    key_id: str
    timestamp: int
    nonce: str
    signature: bytes

    def payload(self, method: str, url: str) -> bytes:
        return signing_payload(str(self.did), self.key_id, self.timestamp, self.nonce, method, url)

    def to_header(self) -> str:
        return (
            f'WBA did="{self.did}",key="{self.key_id}",ts={self.timestamp},'
            f'nonce="{self.nonce}",sig="{b64url_encode(self.signature)}"'
        )

    @classmethod
    def parse(cls, value: str) -> "AuthHeader":
        p = _parse_params(value, "WBA", ("did", "key", "ts", "nonce", "sig"), {"ts"})
        if not _NONCE_RE.match(p["nonce"]):
            raise MalformedHeaderError("nonce must be 16 bytes of lowercase hex")
        if not p["key"]:
            raise MalformedHeaderError("empty key id")
        if p["ts"] != str(int(p["ts"])):
            raise MalformedHeaderError("non-canonical timestamp")
        return cls(_parse_did_strict(p["did"]), p["key"], int(p["ts"]), p["nonce"], _parse_sig(p["sig"]))


def sign_request(did: DidId, key: KeyPair, method: str, url: str, clock: Clock = system_clock) -> AuthHeader:
    ts = int(clock())
    nonce = secrets.token_hex(16)
    payload = signing_payload(str(did), key.key_id, ts, nonce, method, url)
    return AuthHeader(did, key.key_id, ts, nonce, key.sign(payload))


@dataclass(frozen=True)
class Signer:
    """Client-side signing context for authenticated routes."""

    did: DidId
    key: KeyPair
    clock: Clock = system_clock

    def header(self, method: str, url: str) -> str:
        return sign_request(self.did, self.key, method, url, self.clock).to_header()


class NonceStore:
    """Remembers (did, nonce) pairs for the skew window; insert-if-absent is atomic."""

    def __init__(self, window: float = SKEW_WINDOW) -> None:
        self.window = window
        self._seen: dict[tuple[str, str], float] = {}
        self._lock = threading.Lock()
        self._next_purge = 0.0

    def add(self, did: str, nonce: str, now: float) -> bool:
        """Record the pair; False if it was already present and unexpired."""
        key = (did, nonce)
        with self._lock:
            if now >= self._next_purge:
                self._seen = {k: exp for k, exp in self._seen.items() if exp > now}
                self._next_purge = now + self.window / 4
            expiry = self._seen.get(key)
            if expiry is not None and expiry > now:
                return False
            self._seen[key] = now + self.window
            return True

    def __len__(self) -> int:
        return len(self._seen)


@dataclass(frozen=True)
class Verification:
    accepted: bool
    did: DidId | None = None
    reason: str | None = None
    document: DidDocument | None = field(default=None, repr=False, compare=False)


def _rejected(reason: str, did: DidId | None = None) -> Verification:
    return Verification(False, did, reason)


Resolver = Callable[[DidId], DidDocument]


def verify_request(
    header: AuthHeader | str,
    method: str,
    url: str,
    resolver: Resolver,
    nonces: NonceStore,
    clock: Clock = system_clock,
    skew: float = SKEW_WINDOW,
) -> Verification:
    """Check a WBA request signature; never raises for bad input.

    The nonce is recorded only once everything else has passed, so a rejected
    header cannot burn a nonce for a later legitimate request.
    """
    if isinstance(header, str):
        try:
            header = AuthHeader.parse(header)
        except MalformedHeaderError:
            return _rejected(MALFORMED_HEADER)
    try:
        doc = resolver(header.did)
    except AnpError:
        return _rejected(RESOLUTION_FAILURE, header.did)
    vm = doc.method(header.key_id)
    if vm is None:
        return _rejected(UNKNOWN_KEY, header.did)
    if doc.method_for(header.key_id, Purpose.AUTHENTICATION) is None:
        return _rejected(KEY_PURPOSE_MISMATCH, header.did)
    if not verify_signature(vm.public_key, header.signature, header.payload(method, url)):
        return _rejected(BAD_SIGNATURE, header.did)
    now = clock()
    if abs(now - header.timestamp) > skew:
        return _rejected(EXPIRED_TIMESTAMP, header.did)
    if not nonces.add(str(header.did), header.nonce, now):
        return _rejected(REPLAYED_NONCE, header.did)
    return Verification(True, header.did, None, doc)


@dataclass(frozen=True)
class Token:
    subject: DidId
    issuer: DidId
    issued_at: int
    expires_at: int
    token_id: str
    key_id: str
    signature: bytes = field(repr=False)

    def claims(self) -> dict:
        return {
            "sub": str(self.subject),
            "iss": str(self.issuer),
            "iat": self.issued_at,
            "exp": self.expires_at,
            "jti": self.token_id,
            "kid": self.key_id,
        }

    def signing_input(self) -> bytes:
        return TOKEN_LABEL + canonical_json(self.claims())

    def encode(self) -> str:
        return f"{b64url_encode(canonical_json(self.claims()))}.{b64url_encode(self.signature)}"

    @classmethod
    def decode(cls, text: str) -> "Token":
        try:
            claims_part, sig_part = text.split(".")
            raw = b64url_decode(claims_part)
            claims = json.loads(raw.decode("utf-8"))
            if canonical_json(claims) != raw:
                raise ValueError("claims not canonical")
            if set(claims) != {"sub", "iss", "iat", "exp", "jti", "kid"}:
                raise ValueError("unexpected claim set")
            if not all(type(claims[k]) is int for k in ("iat", "exp")):
                raise ValueError("times must be integers")
            return cls(
                parse_did(claims["sub"]),
                parse_did(claims["iss"]),
                claims["iat"],
                claims["exp"],
                str(claims["jti"]),
                str(claims["kid"]),
                b64url_decode(sig_part),
            )
        except (ValueError, TypeError, AttributeError, UnicodeDecodeError, AnpError) as exc:
            raise MalformedTokenError(f"malformed token: {exc}") from exc

    def response_body(self) -> dict:
        return {"token": self.encode(), "expiresAt": self.expires_at}


def issue_token(
    subject: DidId, issuer: DidId, issuer_key: KeyPair, ttl: int = DEFAULT_TOKEN_TTL, clock: Clock = system_clock
) -> Token:
    if ttl <= 0:
        raise ValueError("ttl must be positive")
    now = int(clock())
    unsigned = Token(subject, issuer, now, now + int(ttl), secrets.token_hex(16), issuer_key.key_id, b"")
    return replace(unsigned, signature=issuer_key.sign(unsigned.signing_input()))


@dataclass(frozen=True)
class TokenCheck:
    valid: bool
    claims: dict | None = None
    reason: str | None = None


def verify_token(token: Token | str, issuer_doc: DidDocument, clock: Clock = system_clock) -> TokenCheck:
    if isinstance(token, str):
        try:
            token = Token.decode(token)
        except MalformedTokenError:
            return TokenCheck(False, reason=MALFORMED_TOKEN)
    if token.issuer != issuer_doc.id:
        return TokenCheck(False, reason=UNKNOWN_ISSUER_KEY)
    vm = issuer_doc.method_for(token.key_id, Purpose.AUTHENTICATION)
    if vm is None:
        return TokenCheck(False, reason=UNKNOWN_ISSUER_KEY)
    if not verify_signature(vm.public_key, token.signature, token.signing_input()):
        return TokenCheck(False, reason=BAD_SIGNATURE)
    if not clock() < token.expires_at:
        return TokenCheck(False, reason=EXPIRED)
    return TokenCheck(True, claims=token.claims())


class RiskClass(str, enum.Enum):
    LOW = "low"
    HIGH = "high"


def classify(route: str, risk_table: Mapping[str, RiskClass | str]) -> RiskClass:
    """Total over any route: unlisted routes are treated as high risk."""
    return RiskClass(risk_table.get(route, RiskClass.HIGH))


def human_payload(did: str, key_id: str, route: str, timestamp: int, nonce: str) -> bytes:
    return "\n".join((HUMAN_PAYLOAD_LABEL, did, key_id, route, str(timestamp), nonce)).encode("utf-8")


@dataclass(frozen=True)
class HumanConfirmation:
    """A human's explicit approval of one route, signed with a humanAuthorization key."""

    did: DidId
    key_id: str
    route: str
    timestamp: int
    nonce: str
    signature: bytes

    def payload(self) -> bytes:
        return human_payload(str(self.did), self.key_id, self.route, self.timestamp, self.nonce)

    def to_header(self) -> str:
        return (
            f'WBA did="{self.did}",key="{self.key_id}",route="{self.route}",ts={self.timestamp},'
            f'nonce="{self.nonce}",sig="{b64url_encode(self.signature)}"'
        )

    @classmethod
    def parse(cls, value: str) -> "HumanConfirmation":
        p = _parse_params(value, "WBA", ("did", "key", "route", "ts", "nonce", "sig"), {"ts"})
        if not _NONCE_RE.match(p["nonce"]):
            raise MalformedHeaderError("nonce must be 16 bytes of lowercase hex")
        return cls(_parse_did_strict(p["did"]), p["key"], p["route"], int(p["ts"]), p["nonce"], _parse_sig(p["sig"]))


def sign_human_confirmation(did: DidId, key: KeyPair, route: str, clock: Clock = system_clock) -> HumanConfirmation:
    """Produce the confirmation a user's agent submits once the human has approved.

    Signing with a routine key is allowed here on purpose; the verifier is the
    one that must refuse it.
    """
    ts = int(clock())
    nonce = secrets.token_hex(16)
    sig = key.sign(human_payload(str(did), key.key_id, route, ts, nonce))
    return HumanConfirmation(did, key.key_id, route, ts, nonce, sig)


@dataclass(frozen=True)
class AuditRecord:
    route: str
    requester: str
    decision: str
    reason: str | None
    key_id: str | None
    signature: str | None
    at: float


class AuditLog:
    """Append-only record of high-risk authorization decisions."""

    def __init__(self) -> None:
        self._records: list[AuditRecord] = []
        self._lock = threading.Lock()

    def append(self, record: AuditRecord) -> None:
        with self._lock:
            self._records.append(record)

    @property
    def records(self) -> tuple[AuditRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str | None = None


HumanGate = Callable[[str, DidId], "HumanConfirmation | None"]


def authorize_operation(
    route: str,
    risk: RiskClass | str,
    requester: DidDocument,
    human_gate: HumanGate | None,
    audit_log: AuditLog | None = None,
    clock: Clock = system_clock,
    skew: float = SKEW_WINDOW,
) -> Decision:
    """Allow low-risk routes outright; high-risk ones need a valid human confirmation.

    ``requester`` is the requester's already-resolved DID document. Every
    high-risk decision, allow or deny, is appended to ``audit_log``.
    """
    if RiskClass(risk) is RiskClass.LOW:
        return Decision(True)
    confirmation = human_gate(route, requester.id) if human_gate else None
    if confirmation is None:
        decision = Decision(False, HUMAN_CONFIRMATION_ABSENT)
    else:
        vm = requester.method_for(confirmation.key_id, Purpose.HUMAN_AUTHORIZATION)
        ok = (
            vm is not None
            and confirmation.did == requester.id
            and confirmation.route == route
            and abs(clock() - confirmation.timestamp) <= skew
            and verify_signature(vm.public_key, confirmation.signature, confirmation.payload())
        )
        decision = Decision(True) if ok else Decision(False, HUMAN_SIGNATURE_INVALID)
    if audit_log is not None:
        audit_log.append(
            AuditRecord(
                route=route,
                requester=str(requester.id),
                decision="allow" if decision.allowed else "deny",
                reason=decision.reason,
                key_id=confirmation.key_id if confirmation else None,
                signature=b64url_encode(confirmation.signature) if confirmation else None,
                at=clock(),
            )
        )
    return decision
