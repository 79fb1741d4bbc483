"""did:wba identifiers, key pairs, DID documents and resolution.

Identifier grammar follows the did:web convention::

    did:wba:<domain>[:<segment>]*

A port is carried percent-encoded in the domain (``localhost%3A8000``).
Documents for an identifier with path segments live at
``https://<domain>/<seg>/.../did.json``; an identifier without segments maps to
``https://<domain>/.well-known/did.json``.
"""

from __future__ import annotations

import enum
import json
import re
import secrets
import threading
from dataclasses import dataclass, field
from typing import Any, Sequence
from urllib.parse import unquote

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey

from anp.clock import Clock, system_clock
from anp.encoding import canonical_json, multibase_decode, multibase_encode
from anp.transport import get
from anp.errors import (
    DocumentIdMismatchError,
    FetchFailureError,
    InvalidDocumentError,
    KeyClassViolationError,
    MalformedDidError,
    UnsupportedAlgorithmError,
    UnsupportedMethodError,
)

ED25519 = "Ed25519"
X25519 = "X25519"
SUPPORTED_ALGORITHMS = (ED25519, X25519)

VM_TYPES = {
    ED25519: "Ed25519VerificationKey2020",
    X25519: "X25519KeyAgreementKey2020",
}
AGENT_DESCRIPTION_SERVICE = "AgentDescription"

_LABEL = r"[a-z0-9](?:[a-z0-9-]{0,61}[a-z0-9])?"
_DOMAIN_RE = re.compile(rf"^{_LABEL}(?:\.{_LABEL})*(?:%3A[0-9]{{1,5}})?$")
_SEGMENT_RE = re.compile(r"^(?:[A-Za-z0-9._~-]|%[0-9A-Fa-f]{2})+$")
_PCT_RE = re.compile(r"%[0-9A-Fa-f]{2}")


class KeyClass(str, enum.Enum):
    ROUTINE = "routine"
    HUMAN_AUTHORIZATION = "human_authorization"


class Purpose(str, enum.Enum):
    AUTHENTICATION = "authentication"
    KEY_AGREEMENT = "key_agreement"
    HUMAN_AUTHORIZATION = "human_authorization"


def _upper_pct(text: str) -> str:
    return _PCT_RE.sub(lambda m: m.group(0).upper(), text)


@dataclass(frozen=True)
class DidId:
    domain: str
    path_segments: tuple[str, ...] = ()
    method: str = "wba"

    def __post_init__(self) -> None:
        if self.method != "wba":
            raise UnsupportedMethodError(f"unsupported DID method: {self.method!r}")
        if not _DOMAIN_RE.match(self.domain):
            raise MalformedDidError(f"invalid domain: {self.domain!r}")
        for seg in self.path_segments:
            if not _SEGMENT_RE.match(seg):
                raise MalformedDidError(f"invalid path segment: {seg!r}")
            decoded = unquote(seg)
            if not decoded or "/" in decoded or ":" in decoded:
                raise MalformedDidError(f"path segment decodes to an illegal value: {seg!r}")

    @property
    def host(self) -> str:
        """Network location, with the percent-encoded port decoded."""
        return self.domain.replace("%3A", ":")

    def __str__(self) -> str:
        return ":".join(("did", self.method, self.domain, *self.path_segments))

    def key_url(self, key_id: str) -> str:
        return f"{self}#{key_id}"


def parse_did(text: str) -> DidId:
    """Parse a ``did:wba`` identifier.

    Domains are case-normalized to lowercase and percent escapes to uppercase
    hex; everything else must already be in canonical form.

    Raises:
        UnsupportedMethodError: for any method other than ``wba``.
        MalformedDidError: for a bad prefix, empty domain or illegal characters.
    """
    if not isinstance(text, str):
        raise MalformedDidError("DID must be a string")
    parts = text.split(":")
    if len(parts) < 3 or parts[0] != "did":
        raise MalformedDidError(f"not a DID: {text!r}")
    if parts[1] != "wba":
        raise UnsupportedMethodError(f"unsupported DID method: {parts[1]!r}")
    domain = _upper_pct(parts[2]).lower().replace("%3a", "%3A")
    if not domain:
        raise MalformedDidError("empty domain")
    segments = tuple(_upper_pct(seg) for seg in parts[3:])
    return DidId(domain=domain, path_segments=segments)


def did_to_https_url(did: DidId) -> str:
    if did.path_segments:
        return f"https://{did.host}/{'/'.join(did.path_segments)}/did.json"
    return f"https://{did.host}/.well-known/did.json"


def split_did_url(did_url: str) -> tuple[DidId, str]:
    """Split ``did:wba:...#fragment`` into the identifier and the fragment."""
    did_text, sep, fragment = did_url.partition("#")
    if not sep or not fragment:
        raise MalformedDidError(f"DID URL without fragment: {did_url!r}")
    return parse_did(did_text), fragment


@dataclass(frozen=True)
class KeyPair:
    algorithm: str
    public_key: bytes
    secret_key: bytes = field(repr=False)
    key_class: KeyClass = KeyClass.ROUTINE
    key_id: str = "key-1"

    def sign(self, message: bytes) -> bytes:
        if self.algorithm != ED25519:
            raise UnsupportedAlgorithmError(f"{self.algorithm} keys cannot sign")
        return Ed25519PrivateKey.from_private_bytes(self.secret_key).sign(message)

    def exchange(self, peer_public: bytes) -> bytes:
        if self.algorithm != X25519:
            raise UnsupportedAlgorithmError(f"{self.algorithm} keys cannot do key agreement")
        return X25519PrivateKey.from_private_bytes(self.secret_key).exchange(
            X25519PublicKey.from_public_bytes(peer_public)
        )

    def public_only(self) -> "KeyPair":
        return KeyPair(self.algorithm, self.public_key, b"", self.key_class, self.key_id)


def _raw_public(private) -> bytes:
    return private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def _raw_private(private) -> bytes:
    return private.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )


def generate_keypair(
    algorithm: str = ED25519,
    key_class: KeyClass | str = KeyClass.ROUTINE,
    key_id: str | None = None,
) -> KeyPair:
    """Generate a fresh key pair.

    Raises:
        UnsupportedAlgorithmError: if ``algorithm`` is not Ed25519 or X25519.
        KeyClassViolationError: for an X25519 key classed as human authorization.
    """
    key_class = KeyClass(key_class)
    if algorithm == ED25519:
        private = Ed25519PrivateKey.generate()
    elif algorithm == X25519:
        if key_class is not KeyClass.ROUTINE:
            raise KeyClassViolationError("key-agreement keys are always routine")
        private = X25519PrivateKey.generate()
    else:
        raise UnsupportedAlgorithmError(f"unsupported algorithm: {algorithm!r}")
    if key_id is None:
        prefix = {KeyClass.HUMAN_AUTHORIZATION: "human"}.get(key_class, "key")
        if algorithm == X25519:
            prefix = "x25519"
        key_id = f"{prefix}-{secrets.token_hex(4)}"
    return KeyPair(algorithm, _raw_public(private), _raw_private(private), key_class, key_id)


def keypair_from_secret(
    algorithm: str, secret_key: bytes, key_class: KeyClass | str, key_id: str
) -> KeyPair:
    if algorithm == ED25519:
        private = Ed25519PrivateKey.from_private_bytes(secret_key)
    elif algorithm == X25519:
        private = X25519PrivateKey.from_private_bytes(secret_key)
    else:
        raise UnsupportedAlgorithmError(f"unsupported algorithm: {algorithm!r}")
    return KeyPair(algorithm, _raw_public(private), secret_key, KeyClass(key_class), key_id)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class VerificationMethod:
    id: str
    controller: DidId
    algorithm: str
    public_key: bytes
    purpose: Purpose

    @property
    def fragment(self) -> str:
        return self.id.partition("#")[2]


@dataclass(frozen=True)
class Service:
    type: str
    endpoint: str
    id: str = ""


@dataclass(frozen=True)
class DidDocument:
    id: DidId
    verification_methods: tuple[VerificationMethod, ...]
    authentication: tuple[str, ...]
    human_authorization: tuple[str, ...] = ()
    key_agreement: tuple[str, ...] = ()
    services: tuple[Service, ...] = ()

    def method(self, ref: str) -> VerificationMethod | None:
        """Look up a verification method by full DID URL or bare fragment."""
        if "#" not in ref:
            ref = self.id.key_url(ref)
        for vm in self.verification_methods:
            if vm.id == ref:
                return vm
        return None

    def method_for(self, ref: str, purpose: Purpose) -> VerificationMethod | None:
        """Return the method only if it is referenced under ``purpose``."""
        vm = self.method(ref)
        if vm is None:
            return None
        refs = {
            Purpose.AUTHENTICATION: self.authentication,
            Purpose.HUMAN_AUTHORIZATION: self.human_authorization,
            Purpose.KEY_AGREEMENT: self.key_agreement,
        }[purpose]
        return vm if vm.id in refs else None

    @property
    def agent_description_url(self) -> str | None:
        for svc in self.services:
            if svc.type == AGENT_DESCRIPTION_SERVICE:
                return svc.endpoint
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "id": str(self.id),
            "verificationMethod": [
                {
                    "id": vm.id,
                    "type": VM_TYPES.get(vm.algorithm, vm.algorithm),
                    "controller": str(vm.controller),
                    "publicKeyMultibase": multibase_encode(vm.algorithm, vm.public_key),
                }
                for vm in self.verification_methods
            ],
            "authentication": list(self.authentication),
            "humanAuthorization": list(self.human_authorization),
            "keyAgreement": list(self.key_agreement),
            "service": [
                {"id": svc.id or f"{self.id}#svc-{i}", "type": svc.type, "serviceEndpoint": svc.endpoint}
                for i, svc in enumerate(self.services)
            ],
        }

    def serialize(self) -> bytes:
        return canonical_json(self.to_json())

    @classmethod
    def from_json(cls, data: Any) -> "DidDocument":
        """Build a document from its wire form.

        Purposes are inferred from the reference lists. Structural problems raise
        ``InvalidDocumentError``; invariant violations are left for
        :func:`validate_did_document`.
        """
        try:
            if not isinstance(data, dict):
                raise TypeError("document must be a JSON object")
            did = parse_did(data["id"])
            auth = tuple(_ref_list(data.get("authentication", [])))
            human = tuple(_ref_list(data.get("humanAuthorization", [])))
            agree = tuple(_ref_list(data.get("keyAgreement", [])))
            methods = []
            for raw in data["verificationMethod"]:
                algorithm, public_key = multibase_decode(raw["publicKeyMultibase"])
                if raw.get("type") not in (VM_TYPES[algorithm], algorithm):
                    raise ValueError(f"type {raw.get('type')!r} does not match key encoding")
                vm_id = raw["id"]
                if vm_id in human:
                    purpose = Purpose.HUMAN_AUTHORIZATION
                elif vm_id in agree:
                    purpose = Purpose.KEY_AGREEMENT
                else:
                    purpose = Purpose.AUTHENTICATION
                methods.append(
                    VerificationMethod(vm_id, parse_did(raw["controller"]), algorithm, public_key, purpose)
                )
            services = tuple(
                Service(svc["type"], svc["serviceEndpoint"], svc.get("id", ""))
                for svc in data.get("service", [])
            )
        except InvalidDocumentError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise InvalidDocumentError(f"malformed DID document: {exc}") from exc
        except MalformedDidError as exc:
            raise InvalidDocumentError(f"malformed DID in document: {exc}") from exc
        return cls(did, tuple(methods), auth, human, agree, services)

    @classmethod
    def deserialize(cls, raw: bytes) -> "DidDocument":
        try:
            data = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InvalidDocumentError(f"DID document is not JSON: {exc}") from exc
        return cls.from_json(data)


def _ref_list(value: Any) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise InvalidDocumentError("verification relationship must be a list of DID URLs")
    return value


def build_did_document(
    did: DidId,
    routine_keys: Sequence[KeyPair],
    human_auth_key: KeyPair | None = None,
    agreement_keys: Sequence[KeyPair] = (),
    ad_url: str | None = None,
) -> DidDocument:
    """Assemble a DID document holding only public key material.

    Raises:
        KeyClassViolationError: if a human-authorization key is offered as a
            routine key, a routine key as the human key, or one public key is
            reused across the two classes.
    """
    if not routine_keys:
        raise KeyClassViolationError("at least one routine authentication key is required")
    for key in routine_keys:
        if key.key_class is not KeyClass.ROUTINE or key.algorithm != ED25519:
            raise KeyClassViolationError(f"key {key.key_id!r} is not a routine Ed25519 key")
    for key in agreement_keys:
        if key.algorithm != X25519:
            raise KeyClassViolationError(f"key {key.key_id!r} is not an X25519 key")
    if human_auth_key is not None:
        if human_auth_key.key_class is not KeyClass.HUMAN_AUTHORIZATION or human_auth_key.algorithm != ED25519:
            raise KeyClassViolationError("human authorization key must be an Ed25519 human_authorization key")
        if any(k.public_key == human_auth_key.public_key for k in routine_keys):
            raise KeyClassViolationError("human authorization key reused as a routine key")

    methods: list[VerificationMethod] = []

    def add(key: KeyPair, purpose: Purpose) -> str:
        vm = VerificationMethod(did.key_url(key.key_id), did, key.algorithm, key.public_key, purpose)
        methods.append(vm)
        return vm.id

    auth = tuple(add(k, Purpose.AUTHENTICATION) for k in routine_keys)
    human = (add(human_auth_key, Purpose.HUMAN_AUTHORIZATION),) if human_auth_key else ()
    agree = tuple(add(k, Purpose.KEY_AGREEMENT) for k in agreement_keys)
    services = (Service(AGENT_DESCRIPTION_SERVICE, ad_url, f"{did}#ad"),) if ad_url else ()
    doc = DidDocument(did, tuple(methods), auth, human, agree, services)
    problems = validate_did_document(doc)
    if problems:
        raise KeyClassViolationError("; ".join(problems))
    return doc


def validate_did_document(doc: DidDocument) -> list[str]:
    """Return the list of invariant violations; empty means valid."""
    violations: list[str] = []
    if not doc.verification_methods:
        violations.append("no verification methods")
    if not doc.authentication:
        violations.append("no authentication methods")
    ids = [vm.id for vm in doc.verification_methods]
    seen: set[str] = set()
    for vm in doc.verification_methods:
        if vm.id in seen:
            violations.append(f"duplicate verification method id: {vm.id}")
        seen.add(vm.id)
        did_part, _, fragment = vm.id.partition("#")
        if did_part != str(doc.id) or not fragment:
            violations.append(f"verification method id not a fragment of the document DID: {vm.id}")
        if vm.controller != doc.id:
            violations.append(f"verification method controller mismatch: {vm.id}")
        if vm.algorithm not in SUPPORTED_ALGORITHMS or len(vm.public_key) != 32:
            violations.append(f"unsupported key material: {vm.id}")
    for name, refs in (
        ("authentication", doc.authentication),
        ("humanAuthorization", doc.human_authorization),
        ("keyAgreement", doc.key_agreement),
    ):
        for ref in refs:
            if ref not in ids:
                violations.append(f"dangling {name} reference: {ref}")
    if set(doc.authentication) & set(doc.human_authorization):
        violations.append("auth/human-auth overlap")
    for vm in doc.verification_methods:
        if vm.purpose is Purpose.HUMAN_AUTHORIZATION and vm.id in doc.authentication:
            violations.append(f"human authorization method under authentication: {vm.id}")
        if vm.id in doc.key_agreement and vm.algorithm != X25519:
            violations.append(f"key agreement method is not X25519: {vm.id}")
        if (vm.id in doc.authentication or vm.id in doc.human_authorization) and vm.algorithm != ED25519:
            violations.append(f"signing method is not Ed25519: {vm.id}")
    ad_services = [s for s in doc.services if s.type == AGENT_DESCRIPTION_SERVICE]
    if len(ad_services) > 1:
        violations.append("more than one AgentDescription service")
    return violations


def resolve_did(did: DidId, fetcher) -> DidDocument:
    """Fetch and validate the DID document for ``did``.

    ``fetcher`` is anything with ``send(Request) -> Response`` (a transport).

    Raises:
        FetchFailureError: non-2xx status or transport failure.
        InvalidDocumentError: unparseable document or invariant violations.
        DocumentIdMismatchError: the served document describes another DID.
    """
    url = did_to_https_url(did)
    try:
        resp = get(fetcher, url)
    except Exception as exc:  # transport plug-ins may raise anything
        raise FetchFailureError(f"fetching {url} failed: {exc}") from exc
    if not resp.ok:
        raise FetchFailureError(f"fetching {url} returned {resp.status}")
    doc = DidDocument.deserialize(resp.body)
    if doc.id != did:
        raise DocumentIdMismatchError(f"requested {did}, document describes {doc.id}")
    problems = validate_did_document(doc)
    if problems:
        raise InvalidDocumentError("; ".join(problems))
    return doc


class DidResolver:
    """Caching resolver. Documents are kept for ``ttl`` seconds.

    ``fetch_count`` counts network resolutions (cache misses), which the
    single-round-trip checks rely on.
    """

    def __init__(self, fetcher, clock: Clock = system_clock, ttl: float = 60.0) -> None:
        self.fetcher = fetcher
        self.clock = clock
        self.ttl = ttl
        self.fetch_count = 0
        self._cache: dict[DidId, tuple[float, DidDocument]] = {}
        self._lock = threading.Lock()

    def resolve(self, did: DidId) -> DidDocument:
        now = self.clock()
        with self._lock:
            hit = self._cache.get(did)
            if hit and now - hit[0] < self.ttl:
                return hit[1]
            self.fetch_count += 1
        doc = resolve_did(did, self.fetcher)
        with self._lock:
            self._cache[did] = (now, doc)
        return doc

    __call__ = resolve

    def seed(self, doc: DidDocument) -> None:
        """Pin a locally known document (e.g. a node's own identity)."""
        with self._lock:
            self._cache[doc.id] = (float("inf"), doc)

    def invalidate(self, did: DidId | None = None) -> None:
        with self._lock:
            if did is None:
                self._cache.clear()
            else:
                self._cache.pop(did, None)

