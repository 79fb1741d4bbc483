"""Agent description (AD) documents: build, canonicalize, sign, verify, validate.

AD documents are JSON-LD shaped but contexts are compared as plain strings;
no JSON-LD expansion happens here.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Any, Callable, Iterable
from urllib.parse import urlsplit

from anp.clock import Clock, system_clock
from anp.encoding import b64url_decode, b64url_encode, canonical_json
from anp.errors import AnpError, DescriptionError, DuplicateCapabilityNameError
from anp.identity import DidDocument, DidId, KeyPair, Purpose, parse_did, verify_signature

SCHEMA_ORG_CONTEXT = "https://schema.org"
ANP_CONTEXT = "https://agent-network-protocol.com/context/v1"
ANP_VERSION = "1.0"
DEFAULT_CONTEXT = (SCHEMA_ORG_CONTEXT, ANP_CONTEXT)
SECURITY_SCHEME = "didwba"

REQUIRED_FIELDS = ("@context", "id", "did", "name", "security", "anpVersion")
OPTIONAL_FIELDS = ("owner", "capabilities", "interfaces", "contact", "proof")

# verification failure reasons
NO_PROOF = "no-proof"
BAD_SIGNATURE = "bad-signature"
UNKNOWN_METHOD = "unknown-method"
BINDING_MISMATCH = "binding-mismatch"
RESOLUTION_FAILURE = "resolution-failure"


class CapabilityKind(str, enum.Enum):
    INFORMATION = "information"
    SERVICE = "service"
    TOOL = "tool"


@dataclass(frozen=True)
class Capability:
    name: str
    description: str = ""
    kind: CapabilityKind = CapabilityKind.SERVICE

    def to_json(self) -> dict[str, str]:
        return {"name": self.name, "description": self.description, "kind": CapabilityKind(self.kind).value}


@dataclass(frozen=True)
class InterfaceDecl:
    protocol: str
    endpoint: str
    version: str = "1.0"
    input_description: str = ""
    output_description: str = ""

    def to_json(self) -> dict[str, str]:
        return {
            "protocol": self.protocol,
            "endpoint": self.endpoint,
            "version": self.version,
            "inputDescription": self.input_description,
            "outputDescription": self.output_description,
        }


@dataclass(frozen=True)
class Contact:
    email: str | None = None
    url: str | None = None

    def to_json(self) -> dict[str, str]:
        return {k: v for k, v in (("email", self.email), ("url", self.url)) if v is not None}


@dataclass(frozen=True)
class DocumentProof:
    verification_method: str
    created: str
    signature: bytes

    def to_json(self) -> dict[str, str]:
        return {
            "verificationMethod": self.verification_method,
            "created": self.created,
            "proofValue": b64url_encode(self.signature),
        }


@dataclass(frozen=True)
class AdDocument:
    id: str
    did: DidId
    name: str
    context: tuple[str, ...] = DEFAULT_CONTEXT
    owner: str | None = None
    capabilities: tuple[Capability, ...] = ()
    interfaces: tuple[InterfaceDecl, ...] = ()
    contact: Contact | None = None
    proof: DocumentProof | None = None
    anp_version: str = ANP_VERSION

    @property
    def security(self) -> dict[str, str]:
        return {"scheme": SECURITY_SCHEME, "did": str(self.did)}

    def to_json(self, include_proof: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "@context": list(self.context),
            "anpVersion": self.anp_version,
            "id": self.id,
            "did": str(self.did),
            "name": self.name,
            "capabilities": [c.to_json() for c in self.capabilities],
            "interfaces": [i.to_json() for i in self.interfaces],
            "security": self.security,
        }
        if self.owner is not None:
            out["owner"] = self.owner
        if self.contact is not None:
            out["contact"] = self.contact.to_json()
        if include_proof and self.proof is not None:
            out["proof"] = self.proof.to_json()
        return out

    def serialize(self) -> bytes:
        return json.dumps(self.to_json(), indent=2, ensure_ascii=False).encode("utf-8")

    def unsigned(self) -> "AdDocument":
        return replace(self, proof=None)


def build_agent_description(
    did: DidId,
    name: str,
    capabilities: Iterable[Capability] = (),
    interfaces: Iterable[InterfaceDecl] = (),
    contact: Contact | None = None,
    *,
    ad_url: str,
    owner: str | None = None,
) -> AdDocument:
    """Assemble an unsigned AD document.

    Raises:
        ValueError: empty name.
        DuplicateCapabilityNameError: two capabilities share a name.
    """
    if not name:
        raise ValueError("name must be nonempty")
    caps = tuple(capabilities)
    names = [c.name for c in caps]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DuplicateCapabilityNameError(f"duplicate capability names: {', '.join(dupes)}")
    return AdDocument(
        id=ad_url,
        did=did,
        name=name,
        owner=owner,
        capabilities=caps,
        interfaces=tuple(interfaces),
        contact=contact,
    )


def canonicalize(doc: AdDocument) -> bytes:
    """Sorted-key compact UTF-8 JSON of the document without its proof."""
    return canonical_json(doc.to_json(include_proof=False))


def _iso_utc(ts: float) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def sign_description(doc: AdDocument, key: KeyPair, method_id: str, clock: Clock = system_clock) -> AdDocument:
    signature = key.sign(canonicalize(doc))
    return replace(doc, proof=DocumentProof(method_id, _iso_utc(clock()), signature))


@dataclass(frozen=True)
class DescriptionCheck:
    verified: bool
    reason: str | None = None


def verify_description(doc: AdDocument, resolver: Callable[[DidId], DidDocument]) -> DescriptionCheck:
    """Check the proof against the agent's DID document and the DID<->AD binding."""
    if doc.proof is None:
        return DescriptionCheck(False, NO_PROOF)
    method_did, _, fragment = doc.proof.verification_method.partition("#")
    if method_did != str(doc.did) or not fragment:
        return DescriptionCheck(False, UNKNOWN_METHOD)
    try:
        did_doc = resolver(doc.did)
    except AnpError:
        return DescriptionCheck(False, RESOLUTION_FAILURE)
    vm = did_doc.method_for(doc.proof.verification_method, Purpose.AUTHENTICATION)
    if vm is None:
        return DescriptionCheck(False, UNKNOWN_METHOD)
    if not verify_signature(vm.public_key, doc.proof.signature, canonicalize(doc)):
        return DescriptionCheck(False, BAD_SIGNATURE)
    bound = did_doc.agent_description_url
    if bound is not None and bound != doc.id:
        return DescriptionCheck(False, BINDING_MISMATCH)
    return DescriptionCheck(True)


def _endpoint_ok(url: str, allow_insecure: bool) -> str | None:
    parts = urlsplit(url)
    if not parts.netloc:
        return f"invalid endpoint URL: {url}"
    if parts.scheme == "https" or (allow_insecure and parts.scheme == "http"):
        return None
    if parts.scheme == "http":
        return f"insecure endpoint: {url}"
    return f"unsupported endpoint scheme: {url}"


def _str_field(obj: dict, key: str, where: str, violations: list[str], required: bool = True) -> str | None:
    if key not in obj:
        if required:
            violations.append(f"missing required field: {where}{key}")
        return None
    value = obj[key]
    if not isinstance(value, str):
        violations.append(f"field must be a string: {where}{key}")
        return None
    return value


def validate_agent_description(
    raw: bytes | str, allow_insecure: bool = False
) -> tuple[AdDocument | None, list[str]]:
    """Parse and check an AD document.

    Returns the document only when there are no violations. ``allow_insecure``
    permits plain-http endpoints (sim/dev mode).
    """
    try:
        data = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        return None, [f"malformed JSON: {exc}"]
    if not isinstance(data, dict):
        return None, ["document must be a JSON object"]

    v: list[str] = []
    known = set(REQUIRED_FIELDS) | set(OPTIONAL_FIELDS)
    for key in REQUIRED_FIELDS:
        if key not in data:
            v.append(f"missing required field: {key}")
    for key in sorted(set(data) - known):
        v.append(f"unknown field: {key}")

    context = data.get("@context")
    if context is not None:
        if not isinstance(context, list) or not all(isinstance(c, str) for c in context):
            v.append("@context must be a list of URLs")
            context = None
        elif ANP_CONTEXT not in context:
            v.append("@context lacks the ANP vocabulary")
    if "anpVersion" in data and data["anpVersion"] != ANP_VERSION:
        v.append(f"unsupported anpVersion: {data['anpVersion']!r}")

    doc_id = _str_field(data, "id", "", v, required=False)
    if doc_id is not None and (problem := _endpoint_ok(doc_id, allow_insecure)):
        v.append(problem.replace("endpoint", "document id", 1))
    name = _str_field(data, "name", "", v, required=False)
    if name == "":
        v.append("name must be nonempty")

    did = None
    did_text = _str_field(data, "did", "", v, required=False)
    if did_text is not None:
        try:
            did = parse_did(did_text)
        except AnpError as exc:
            v.append(f"invalid did: {exc}")

    security = data.get("security")
    if security is not None:
        if not isinstance(security, dict):
            v.append("security must be an object")
        else:
            if security.get("scheme") != SECURITY_SCHEME:
                v.append(f"unsupported security scheme: {security.get('scheme')!r}")
            if security.get("did") != did_text:
                v.append("security.did does not match did")
            for extra in sorted(set(security) - {"scheme", "did"}):
                v.append(f"unknown field: security.{extra}")

    owner = data.get("owner")
    if owner is not None and not isinstance(owner, str):
        v.append("owner must be a string")

    capabilities = _parse_capabilities(data.get("capabilities", []), v)
    interfaces = _parse_interfaces(data.get("interfaces", []), v, allow_insecure)

    contact = None
    if "contact" in data:
        raw_contact = data["contact"]
        if not isinstance(raw_contact, dict) or set(raw_contact) - {"email", "url"} or not all(
            isinstance(x, str) for x in raw_contact.values()
        ):
            v.append("contact must be an object with optional email/url strings")
        else:
            contact = Contact(raw_contact.get("email"), raw_contact.get("url"))

    proof = None
    if "proof" in data:
        raw_proof = data["proof"]
        try:
            if set(raw_proof) != {"verificationMethod", "created", "proofValue"}:
                raise ValueError("unexpected proof fields")
            proof = DocumentProof(
                str(raw_proof["verificationMethod"]),
                str(raw_proof["created"]),
                b64url_decode(raw_proof["proofValue"]),
            )
        except (TypeError, ValueError, AttributeError) as exc:
            v.append(f"malformed proof: {exc}")

    if v:
        return None, v
    assert did is not None and doc_id is not None and name is not None
    doc = AdDocument(
        id=doc_id,
        did=did,
        name=name,
        context=tuple(context),
        owner=owner,
        capabilities=capabilities,
        interfaces=interfaces,
        contact=contact,
        proof=proof,
        anp_version=data["anpVersion"],
    )
    return doc, []


def _parse_capabilities(raw: Any, v: list[str]) -> tuple[Capability, ...]:
    if not isinstance(raw, list):
        v.append("capabilities must be a list")
        return ()
    out = []
    for i, item in enumerate(raw):
        where = f"capabilities[{i}]."
        if not isinstance(item, dict):
            v.append(f"{where[:-1]} must be an object")
            continue
        name = _str_field(item, "name", where, v)
        desc = _str_field(item, "description", where, v)
        kind = _str_field(item, "kind", where, v)
        for extra in sorted(set(item) - {"name", "description", "kind"}):
            v.append(f"unknown field: {where}{extra}")
        if kind is not None and kind not in {k.value for k in CapabilityKind}:
            v.append(f"invalid capability kind: {kind!r}")
            kind = None
        if name == "":
            v.append(f"empty capability name at {where[:-1]}")
        if name and desc is not None and kind is not None:
            out.append(Capability(name, desc, CapabilityKind(kind)))
    names = [c.name for c in out]
    for dup in sorted({n for n in names if names.count(n) > 1}):
        v.append(f"duplicate capability name: {dup}")
    return tuple(out)


def _parse_interfaces(raw: Any, v: list[str], allow_insecure: bool) -> tuple[InterfaceDecl, ...]:
    if not isinstance(raw, list):
        v.append("interfaces must be a list")
        return ()
    keys = ("protocol", "endpoint", "version", "inputDescription", "outputDescription")
    out = []
    for i, item in enumerate(raw):
        where = f"interfaces[{i}]."
        if not isinstance(item, dict):
            v.append(f"{where[:-1]} must be an object")
            continue
        values = [_str_field(item, k, where, v) for k in keys]
        for extra in sorted(set(item) - set(keys)):
            v.append(f"unknown field: {where}{extra}")
        if values[1] is not None and (problem := _endpoint_ok(values[1], allow_insecure)):
            v.append(problem)
        if all(x is not None for x in values):
            out.append(InterfaceDecl(*values))  # type: ignore[arg-type]
    return tuple(out)


def parse_agent_description(raw: bytes | str, allow_insecure: bool = False) -> AdDocument:
    """Like :func:`validate_agent_description` but raises on any violation."""
    doc, violations = validate_agent_description(raw, allow_insecure)
    if doc is None:
        raise DescriptionError("; ".join(violations))
    return doc


def interface_domains(doc: AdDocument) -> list[str]:
    """Distinct hosts named by the document's interface endpoints, in order."""
    seen: list[str] = []
    for iface in doc.interfaces:
        host = urlsplit(iface.endpoint).netloc.lower()
        if host and host not in seen:
            seen.append(host)
    return seen

