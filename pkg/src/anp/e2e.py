"""End-to-end encrypted sessions between two DIDs.

Handshake (three messages' worth of work over one request/response):

1. initiator sends a fresh ephemeral X25519 key, signed with its DID
   authentication key over the handshake transcript;
2. responder checks that signature against the initiator's DID document, replies
   with its own ephemeral key signed over the transcript hash of message 1 plus
   its reply fields, and derives the session;
3. initiator checks the reply and derives the same session.

Directional keys come from HKDF-SHA256 with the ephemeral-ephemeral shared secret
as input key material and the full transcript hash as salt. Ephemeral secrets
live only in the pending handshake and are dropped once keys are derived.

Envelope frame: ``version(1) | session_id(16) | sequence(8, BE) | len(4, BE) | ciphertext||tag``.
On the node's message route the frame is preceded by a one-line JSON routing
header (sender and recipient DIDs).
"""

from __future__ import annotations

import hashlib
import json
import secrets
import struct
from dataclasses import dataclass, field, replace
from typing import Any

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from anp.encoding import b64url_decode, b64url_encode, canonical_json
from anp.errors import (
    AnpError,
    AuthFailureError,
    BadHandshakeSignatureError,
    CounterExhaustedError,
    MalformedEnvelopeError,
    NoKeyAgreementMethodError,
    ReplayedSequenceError,
    SessionMismatchError,
    UnknownInitiatorKeyError,
)
from anp.identity import (
    X25519,
    DidDocument,
    DidId,
    KeyPair,
    Purpose,
    generate_keypair,
    parse_did,
    verify_signature,
)

ENVELOPE_VERSION = 1
MAX_SEQUENCE = 2**64 - 1
_HEADER = struct.Struct(">B16sQI")
_TAG_LEN = 16
_INIT_LABEL = b"anp-e2e.v1 handshake-init\n"
_REPLY_LABEL = b"anp-e2e.v1 handshake-reply\n"


@dataclass(frozen=True)
class LocalIdentity:
    """A DID together with the private keys the E2E layer needs."""

    did: DidId
    auth_key: KeyPair
    agreement_key: KeyPair


@dataclass(frozen=True)
class HandshakeMessage:
    sender_did: DidId
    recipient_did: DidId
    ephemeral_public: bytes
    static_key_id: str
    auth_key_id: str
    handshake_nonce: bytes
    sender_signature: bytes = b""

    def transcript(self) -> bytes:
        return _INIT_LABEL + canonical_json(self._fields())

    def _fields(self) -> dict[str, str]:
        return {
            "sender": str(self.sender_did),
            "recipient": str(self.recipient_did),
            "ephemeral": b64url_encode(self.ephemeral_public),
            "staticKeyId": self.static_key_id,
            "authKeyId": self.auth_key_id,
            "nonce": b64url_encode(self.handshake_nonce),
        }

    def to_json(self) -> dict[str, str]:
        return {**self._fields(), "signature": b64url_encode(self.sender_signature)}

    @classmethod
    def from_json(cls, data: Any) -> "HandshakeMessage":
        try:
            return cls(
                parse_did(data["sender"]),
                parse_did(data["recipient"]),
                _b64_exact(data["ephemeral"], 32),
                str(data["staticKeyId"]),
                str(data["authKeyId"]),
                _b64_exact(data["nonce"], 16),
                b64url_decode(data["signature"]),
            )
        except (KeyError, TypeError, ValueError, AnpError) as exc:
            raise BadHandshakeSignatureError(f"malformed handshake message: {exc}") from exc


@dataclass(frozen=True)
class HandshakeReply:
    sender_did: DidId
    recipient_did: DidId
    ephemeral_public: bytes
    auth_key_id: str
    init_hash: bytes
    sender_signature: bytes = b""

    def transcript(self) -> bytes:
        return _REPLY_LABEL + canonical_json(self._fields())

    def _fields(self) -> dict[str, str]:
        return {
            "sender": str(self.sender_did),
            "recipient": str(self.recipient_did),
            "ephemeral": b64url_encode(self.ephemeral_public),
            "authKeyId": self.auth_key_id,
            "initHash": b64url_encode(self.init_hash),
        }

    def to_json(self) -> dict[str, str]:
        return {**self._fields(), "signature": b64url_encode(self.sender_signature)}

    @classmethod
    def from_json(cls, data: Any) -> "HandshakeReply":
        try:
            return cls(
                parse_did(data["sender"]),
                parse_did(data["recipient"]),
                _b64_exact(data["ephemeral"], 32),
                str(data["authKeyId"]),
                _b64_exact(data["initHash"], 32),
                b64url_decode(data["signature"]),
            )
        except (KeyError, TypeError, ValueError, AnpError) as exc:
            raise BadHandshakeSignatureError(f"malformed handshake reply: {exc}") from exc


def _b64_exact(text: str, length: int) -> bytes:
    raw = b64url_decode(text)
    if len(raw) != length:
        raise ValueError(f"expected {length} bytes")
    return raw


@dataclass
class Session:
    local_did: DidId
    remote_did: DidId
    session_id: bytes
    send_key: bytes = field(repr=False)
    recv_key: bytes = field(repr=False)
    send_counter: int = 0
    recv_counter: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "localDid": str(self.local_did),
            "remoteDid": str(self.remote_did),
            "sessionId": self.session_id.hex(),
            "sendKey": self.send_key.hex(),
            "recvKey": self.recv_key.hex(),
            "sendCounter": self.send_counter,
            "recvCounter": self.recv_counter,
        }


@dataclass
class PendingSession:
    local: LocalIdentity
    remote_did: DidId
    message: HandshakeMessage
    ephemeral: KeyPair | None = field(repr=False)


def _transcript_hash(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(struct.pack(">I", len(part)))
        h.update(part)
    return h.digest()


def _derive(shared: bytes, transcript_hash: bytes) -> tuple[bytes, bytes, bytes]:
    """Return (initiator->responder key, responder->initiator key, session id)."""
    okm = HKDF(
        algorithm=hashes.SHA256(),
        length=32 + 32 + 16,
        salt=transcript_hash,
        info=b"anp-e2e.v1 session keys",
    ).derive(shared)
    return okm[:32], okm[32:64], okm[64:]


def _auth_key(doc: DidDocument, key_id: str):
    vm = doc.method_for(key_id, Purpose.AUTHENTICATION)
    return vm.public_key if vm else None


def initiate_handshake(local: LocalIdentity, remote_doc: DidDocument) -> tuple[HandshakeMessage, PendingSession]:
    """Start a handshake towards the owner of ``remote_doc``.

    Raises:
        NoKeyAgreementMethodError: if the remote document lists no keyAgreement key.
    """
    if not remote_doc.key_agreement:
        raise NoKeyAgreementMethodError(f"{remote_doc.id} has no keyAgreement method")
    ephemeral = generate_keypair(X25519, key_id="ephemeral")
    unsigned = HandshakeMessage(
        sender_did=local.did,
        recipient_did=remote_doc.id,
        ephemeral_public=ephemeral.public_key,
        static_key_id=local.agreement_key.key_id,
        auth_key_id=local.auth_key.key_id,
        handshake_nonce=secrets.token_bytes(16),
    )
    msg = replace(unsigned, sender_signature=local.auth_key.sign(unsigned.transcript()))
    return msg, PendingSession(local, remote_doc.id, msg, ephemeral)


def respond_handshake(
    msg: HandshakeMessage, local: LocalIdentity, initiator_doc: DidDocument
) -> tuple[HandshakeReply, Session]:
    """Verify an initiator's message and establish the responder side.

    Raises:
        UnknownInitiatorKeyError: the message names a key absent from the initiator document.
        BadHandshakeSignatureError: signature, sender or recipient do not check out.
    """
    if msg.sender_did != initiator_doc.id or msg.recipient_did != local.did:
        raise BadHandshakeSignatureError("handshake addressed to or from the wrong DID")
    public = _auth_key(initiator_doc, msg.auth_key_id)
    if public is None or initiator_doc.method_for(msg.static_key_id, Purpose.KEY_AGREEMENT) is None:
        raise UnknownInitiatorKeyError("initiator key not found in its DID document")
    if not verify_signature(public, msg.sender_signature, msg.transcript()):
        raise BadHandshakeSignatureError("initiator signature does not verify")

    ephemeral = generate_keypair(X25519, key_id="ephemeral")
    init_bytes = msg.transcript()
    unsigned = HandshakeReply(
        sender_did=local.did,
        recipient_did=msg.sender_did,
        ephemeral_public=ephemeral.public_key,
        auth_key_id=local.auth_key.key_id,
        init_hash=hashlib.sha256(init_bytes).digest(),
    )
    reply = replace(unsigned, sender_signature=local.auth_key.sign(unsigned.transcript()))
    try:
        shared = ephemeral.exchange(msg.ephemeral_public)
    except ValueError as exc:
        raise BadHandshakeSignatureError("degenerate ephemeral key") from exc
    i2r, r2i, sid = _derive(shared, _transcript_hash(init_bytes, reply.transcript()))
    del ephemeral
    return reply, Session(local.did, msg.sender_did, sid, send_key=r2i, recv_key=i2r)


def complete_handshake(pending: PendingSession, reply: HandshakeReply, responder_doc: DidDocument) -> Session:
    """Verify the responder's reply and derive the initiator session.

    Raises:
        BadHandshakeSignatureError: bad signature, wrong signer, or a reply bound
            to a different handshake transcript.
    """
    if pending.ephemeral is None:
        raise BadHandshakeSignatureError("handshake already completed")
    init_bytes = pending.message.transcript()
    if (
        reply.init_hash != hashlib.sha256(init_bytes).digest()
        or reply.sender_did != pending.remote_did
        or reply.recipient_did != pending.local.did
        or responder_doc.id != pending.remote_did
    ):
        raise BadHandshakeSignatureError("reply does not match this handshake")
    public = _auth_key(responder_doc, reply.auth_key_id)
    if public is None or not verify_signature(public, reply.sender_signature, reply.transcript()):
        raise BadHandshakeSignatureError("responder signature does not verify")
    try:
        shared = pending.ephemeral.exchange(reply.ephemeral_public)
    except ValueError as exc:
        raise BadHandshakeSignatureError("degenerate ephemeral key") from exc
    pending.ephemeral = None
    i2r, r2i, sid = _derive(shared, _transcript_hash(init_bytes, reply.transcript()))
    return Session(pending.local.did, pending.remote_did, sid, send_key=i2r, recv_key=r2i)


@dataclass(frozen=True)
class Envelope:
    session_id: bytes
    sequence: int
    ciphertext: bytes
    auth_tag: bytes
    sender_did: str
    recipient_did: str

    def routing_header(self) -> dict[str, str]:
        return {"sender": self.sender_did, "recipient": self.recipient_did}

    def frame(self) -> bytes:
        body = self.ciphertext + self.auth_tag
        return _HEADER.pack(ENVELOPE_VERSION, self.session_id, self.sequence, len(body)) + body

    def to_bytes(self) -> bytes:
        """Routing header line followed by the binary frame (the message-route body)."""
        return canonical_json(self.routing_header()) + b"\n" + self.frame()

    @classmethod
    def from_frame(cls, frame: bytes, sender_did: str, recipient_did: str) -> "Envelope":
        if len(frame) < _HEADER.size:
            raise MalformedEnvelopeError("frame too short")
        version, sid, seq, length = _HEADER.unpack_from(frame)
        body = frame[_HEADER.size:]
        if version != ENVELOPE_VERSION:
            raise MalformedEnvelopeError(f"unsupported envelope version {version}")
        if length != len(body) or length < _TAG_LEN:
            raise MalformedEnvelopeError("length mismatch")
        return cls(sid, seq, body[:-_TAG_LEN], body[-_TAG_LEN:], sender_did, recipient_did)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        line, sep, frame = data.partition(b"\n")
        if not sep:
            raise MalformedEnvelopeError("missing routing header")
        try:
            routing = json.loads(line.decode("utf-8"))
            sender, recipient = str(routing["sender"]), str(routing["recipient"])
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedEnvelopeError(f"bad routing header: {exc}") from exc
        return cls.from_frame(frame, sender, recipient)


def _nonce(sequence: int) -> bytes:
    return b"\x00\x00\x00\x00" + sequence.to_bytes(8, "big")


def _aad(session_id: bytes, sequence: int, sender: str, recipient: str) -> bytes:
    return (
        bytes([ENVELOPE_VERSION])
        + session_id
        + sequence.to_bytes(8, "big")
        + canonical_json({"sender": sender, "recipient": recipient})
    )


def encrypt(session: Session, plaintext: bytes) -> Envelope:
    if session.send_counter >= MAX_SEQUENCE:
        raise CounterExhaustedError("send counter exhausted; start a new session")
    seq = session.send_counter + 1
    sender, recipient = str(session.local_did), str(session.remote_did)
    sealed = ChaCha20Poly1305(session.send_key).encrypt(
        _nonce(seq), plaintext, _aad(session.session_id, seq, sender, recipient)
    )
    session.send_counter = seq
    return Envelope(session.session_id, seq, sealed[:-_TAG_LEN], sealed[-_TAG_LEN:], sender, recipient)


def decrypt(session: Session, envelope: Envelope) -> bytes:
    """Open an envelope; sequence numbers must strictly increase.

    Raises:
        SessionMismatchError: envelope belongs to another session.
        ReplayedSequenceError: sequence not above the last accepted one.
        AuthFailureError: authentication tag does not verify.
    """
    if envelope.session_id != session.session_id:
        raise SessionMismatchError("envelope is for a different session")
    if envelope.sequence <= session.recv_counter:
        raise ReplayedSequenceError(f"sequence {envelope.sequence} already seen")
    try:
        plaintext = ChaCha20Poly1305(session.recv_key).decrypt(
            _nonce(envelope.sequence),
            envelope.ciphertext + envelope.auth_tag,
            _aad(envelope.session_id, envelope.sequence, envelope.sender_did, envelope.recipient_did),
        )
    except (InvalidTag, OverflowError) as exc:
        raise AuthFailureError("envelope failed authentication") from exc
    session.recv_counter = envelope.sequence
    return plaintext
