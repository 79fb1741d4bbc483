"""The node: one domain's public documents plus its authenticated routes.

``Node.handle`` maps a :class:`~anp.transport.Request` to a
:class:`~anp.transport.Response` and never raises, so the same object backs the
simulated network and the live HTTP server.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Iterable
from urllib.parse import parse_qs, urlsplit

from anp.auth import (
    MALFORMED_HEADER,
    HUMAN_AUTHORIZATION_HEADER,
    TOKEN_HEADER,
    AuditLog,
    HumanConfirmation,
    NonceStore,
    RiskClass,
    authorize_operation,
    classify,
    issue_token,
    verify_request,
    verify_token,
)
from anp.clock import Clock, system_clock
from anp.discovery import SearchIndex, build_collection_pages, index_refresh
from anp.e2e import Envelope, HandshakeMessage, Session, decrypt, encrypt, respond_handshake
from anp.errors import (
    AnpError,
    AuthFailureError,
    ConfigInvalidError,
    E2eError,
    KeyStoreError,
    MalformedEnvelopeError,
    MalformedHeaderError,
    NegotiationError,
    ReplayedSequenceError,
)
from anp.identity import DidDocument, DidId, DidResolver, Purpose, parse_did, verify_signature
from anp.metaproto import (
    Capabilities,
    Kind,
    NegotiationMessage,
    NegotiationSession,
    Negotiator,
    accept_proposal,
    step_session,
)
from anp.node.config import (
    HANDSHAKE,
    MESSAGE,
    NEGOTIATE,
    NEGOTIATION_CACHE,
    REGISTER,
    SEARCH,
    TRANSFER,
    NodeConfig,
    did_document_path,
)
from anp.node.keys import AgentKeys
from anp.transport import Request, Response, Transport, json_response

logger = logging.getLogger(__name__)

MessageHandler = Callable[[DidId, DidId, bytes], bytes]


def echo_handler(recipient: DidId, sender: DidId, plaintext: bytes) -> bytes:
    return plaintext


def _error(status: int, reason: str, **extra: Any) -> Response:
    return json_response(status, {"error": reason, **extra})


@dataclass(frozen=True)
class Received:
    recipient: DidId
    sender: DidId
    plaintext: bytes


class Node:
    """A running node. Thread-safe; ``handle`` may be called concurrently."""

    def __init__(
        self,
        config: NodeConfig,
        agents: Iterable[AgentKeys],
        transport: Transport,
        *,
        negotiator: Negotiator | None = None,
        message_handler: MessageHandler = echo_handler,
        clock: Clock = system_clock,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        config.validate()
        self.config = config
        self.clock = clock
        self.sleep = sleep
        self.transport = transport
        self.agents: dict[DidId, AgentKeys] = {}
        for keys in agents:
            self._check_keys(keys)
            self.agents[keys.did] = keys
        if config.did not in self.agents:
            raise KeyStoreError(f"no keys for the node DID {config.did}")
        self.identity = self.agents[config.did]
        self.resolver = DidResolver(transport, clock)
        for doc in config.did_documents:
            self.resolver.seed(doc)
        self.nonces = NonceStore()
        self.human_nonces = NonceStore()
        self.audit_log = AuditLog()
        if negotiator is None:
            negotiator = Negotiator(Capabilities(tuple(p.descriptor for p in config.protocols)), clock=clock)
            for proto in config.protocols:
                negotiator.register_handler(proto.descriptor, proto.handler)
        self.negotiator = negotiator
        self.message_handler = message_handler
        self.index = (
            SearchIndex(config.refresh_interval, allow_insecure=config.allow_insecure)
            if config.index_enabled
            else None
        )
        self.inbox: list[Received] = []
        self.executed: list[dict[str, Any]] = []
        self._sessions: dict[bytes, Session] = {}
        self._negotiations: dict[tuple[str, str], NegotiationSession] = {}
        self._lock = threading.RLock()
        self._did_docs = {did_document_path(d.id): d for d in config.did_documents}
        self._ads = {urlsplit(a.id).path: a for a in config.agents}
        self._listing = [a.id for a in config.agents]
        self._routes: dict[str, Callable[[Request, DidId], Response]] = {
            NEGOTIATE: self._negotiate,
            HANDSHAKE: self._handshake,
            MESSAGE: self._message,
            REGISTER: self._register,
            SEARCH: self._search,
            NEGOTIATION_CACHE: self._negotiation_cache,
            TRANSFER: self._transfer,
        }

    def _check_keys(self, keys: AgentKeys) -> None:
        doc = self.config.did_document(keys.did)
        if doc is None:
            raise ConfigInvalidError(f"keys given for {keys.did}, which this node does not host")
        vm = doc.method_for(keys.auth_key.key_id, Purpose.AUTHENTICATION)
        agree = doc.method_for(keys.agreement_key.key_id, Purpose.KEY_AGREEMENT)
        if vm is None or vm.public_key != keys.auth_key.public_key:
            raise KeyStoreError(f"authentication key for {keys.did} does not match its DID document")
        if agree is None or agree.public_key != keys.agreement_key.public_key:
            raise KeyStoreError(f"key agreement key for {keys.did} does not match its DID document")

    @property
    def domain(self) -> str:
        return self.config.host

    @property
    def document(self) -> DidDocument:
        doc = self.config.did_document(self.config.did)
        assert doc is not None
        return doc

    # -- request handling -------------------------------------------------

    def handle(self, request: Request) -> Response:
        try:
            return self._dispatch(request)
        except Exception:
            logger.exception("unhandled error for %s %s", request.method, request.url)
            return _error(500, "internal-error")

    def _dispatch(self, request: Request) -> Response:
        route = f"{request.method.upper()} {request.path}"
        handler = self._routes.get(route)
        if handler is None:
            if request.method.upper() == "GET":
                return self._public(request)
            return _error(404 if not request.path.startswith("/anp/") else 405, "no-such-route")
        if request.host != self.domain:
            return _error(421, "misdirected-request")
        requester, token_headers, failure = self._authenticate(request)
        if failure is not None:
            return failure
        assert requester is not None
        if classify(route, self.config.risk_table) is RiskClass.LOW:
            resp = handler(request, requester)
        else:
            resp = self._high_risk(request, route, requester, handler)
        resp.headers.update(token_headers)
        return resp

    def _high_risk(self, request: Request, route: str, requester: DidId, handler) -> Response:
        try:
            requester_doc = self.resolver(requester)
        except AnpError:
            return _error(401, "resolution-failure")
        decision = authorize_operation(
            route,
            RiskClass.HIGH,
            requester_doc,
            lambda r, did: self._human_gate(request, r, requester_doc),
            self.audit_log,
            self.clock,
        )
        if not decision.allowed:
            return _error(403, decision.reason or "forbidden")
        return handler(request, requester)

    def _authenticate(self, request: Request) -> tuple[DidId | None, dict[str, str], Response | None]:
        value = request.header("Authorization")
        if not value:
            return None, {}, json_response(401, {"error": "missing-authorization"}, {"WWW-Authenticate": "WBA"})
        if value.startswith("Bearer "):
            check = verify_token(value[len("Bearer "):], self.document, self.clock)
            if not check.valid:
                return None, {}, json_response(401, {"error": check.reason}, {"WWW-Authenticate": "WBA"})
            return parse_did(check.claims["sub"]), {}, None
        result = verify_request(value, request.method.upper(), request.url, self.resolver, self.nonces, self.clock)
        if not result.accepted:
            return None, {}, json_response(401, {"error": result.reason}, {"WWW-Authenticate": "WBA"})
        token = issue_token(result.did, self.config.did, self.identity.auth_key, self.config.token_ttl, self.clock)
        return result.did, {TOKEN_HEADER: json.dumps(token.response_body())}, None

    def _human_gate(self, request: Request, route: str, requester: DidDocument) -> HumanConfirmation | None:
        value = request.header(HUMAN_AUTHORIZATION_HEADER)
        if value is None:
            return None
        try:
            conf = HumanConfirmation.parse(value)
        except MalformedHeaderError:
            # present but unusable: surfaces as an invalid signature, not as absence
            return HumanConfirmation(requester.id, MALFORMED_HEADER, route, 0, "", b"")
        vm = requester.method_for(conf.key_id, Purpose.HUMAN_AUTHORIZATION)
        if vm is not None and verify_signature(vm.public_key, conf.signature, conf.payload()):
            if not self.human_nonces.add(str(conf.did), conf.nonce, self.clock()):
                return HumanConfirmation(requester.id, conf.key_id, route, 0, conf.nonce, b"")
        return conf

    # -- public documents -------------------------------------------------

    def _public(self, request: Request) -> Response:
        path = request.path
        if path == self.config.well_known_path:
            return self._listing_page(request)
        if path in self._did_docs:
            return Response(200, {"Content-Type": "application/did+json"}, self._did_docs[path].serialize())
        if path in self._ads:
            return Response(200, {"Content-Type": "application/ld+json"}, self._ads[path].serialize())
        return _error(404, "not-found")

    def _listing_page(self, request: Request) -> Response:
        base = f"https://{self.domain}{self.config.well_known_path}"
        pages = build_collection_pages(self._listing, self.config.page_size, base)
        raw = parse_qs(request.query).get("page", ["1"])
        try:
            number = int(raw[0])
        except ValueError:
            return _error(400, "bad-page")
        if not 1 <= number <= len(pages):
            return _error(404, "no-such-page")
        return json_response(200, pages[number - 1].to_json())

    # -- authenticated routes ----------------------------------------------

    def _negotiate(self, request: Request, requester: DidId) -> Response:
        try:
            msg = NegotiationMessage.from_json(request.json())
        except (ValueError, NegotiationError) as exc:
            return _error(400, "malformed-message", detail=str(exc))
        key = (str(requester), msg.session_id)
        with self._lock:
            try:
                if msg.kind is Kind.PROPOSE:
                    if key in self._negotiations:
                        return _error(409, "session-exists")
                    session, out = accept_proposal(msg, self.negotiator)
                else:
                    current = self._negotiations.get(key)
                    if current is None:
                        return _error(404, "no-such-session")
                    session, out = step_session(current, msg, self.negotiator)
            except NegotiationError as exc:
                return _error(409, exc.code, detail=str(exc))
            self._negotiations[key] = session
        return json_response(200, {"phase": session.phase.value, "message": out.to_json() if out else None})

    def negotiation(self, requester: DidId, session_id: str) -> NegotiationSession | None:
        return self._negotiations.get((str(requester), session_id))

    def _handshake(self, request: Request, requester: DidId) -> Response:
        try:
            msg = HandshakeMessage.from_json(request.json())
        except (ValueError, E2eError) as exc:
            return _error(400, "malformed-handshake", detail=str(exc))
        if msg.sender_did != requester:
            return _error(403, "sender-mismatch")
        agent = self.agents.get(msg.recipient_did)
        if agent is None:
            return _error(404, "unknown-recipient")
        try:
            initiator_doc = self.resolver(msg.sender_did)
            reply, session = respond_handshake(msg, agent.local_identity, initiator_doc)
        except E2eError as exc:
            return _error(400, exc.code)
        except AnpError:
            return _error(400, "resolution-failure")
        with self._lock:
            self._sessions[session.session_id] = session
        return json_response(200, reply.to_json())

    def _message(self, request: Request, requester: DidId) -> Response:
        try:
            envelope = Envelope.from_bytes(request.body)
        except MalformedEnvelopeError as exc:
            return _error(400, exc.code)
        if envelope.sender_did != str(requester):
            return _error(403, "sender-mismatch")
        with self._lock:
            session = self._sessions.get(envelope.session_id)
            if session is None or str(session.local_did) != envelope.recipient_did:
                return _error(404, "no-such-session")
            if str(session.remote_did) != envelope.sender_did:
                return _error(403, "sender-mismatch")
            try:
                plaintext = decrypt(session, envelope)
            except ReplayedSequenceError as exc:
                return _error(409, exc.code)
            except (AuthFailureError, E2eError) as exc:
                return _error(400, exc.code)
            self.inbox.append(Received(session.local_did, requester, plaintext))
            reply = encrypt(session, self.message_handler(session.local_did, requester, plaintext))
        return Response(200, {"Content-Type": "application/octet-stream"}, reply.to_bytes())

    def _register(self, request: Request, requester: DidId) -> Response:
        if self.index is None:
            return _error(404, "no-index")
        try:
            ad_url = request.json()["adUrl"]
        except (ValueError, KeyError, TypeError):
            return _error(400, "adUrl required")
        parts = urlsplit(ad_url) if isinstance(ad_url, str) else None
        allowed = ("https", "http") if self.config.allow_insecure else ("https",)
        if parts is None or parts.scheme not in allowed or not parts.netloc:
            return _error(400, "adUrl must be an https URL")
        outcome = self.index.register(ad_url, str(requester), self.clock())
        if not outcome.accepted:
            return _error(409, outcome.reason or "duplicate")
        return json_response(201, {"adUrl": ad_url, "status": self.index.status(ad_url)})

    def _search(self, request: Request, requester: DidId) -> Response:
        if self.index is None:
            return _error(404, "no-index")
        params = parse_qs(request.query)
        try:
            limit = int(params.get("limit", ["10"])[0])
        except ValueError:
            return _error(400, "bad-limit")
        if not 1 <= limit <= 100:
            return _error(400, "bad-limit")
        results = self.index.query(params.get("q", [""])[0].split(), limit)
        return json_response(200, {"results": [{"adUrl": u, "score": s} for u, s in results]})

    def _negotiation_cache(self, request: Request, requester: DidId) -> Response:
        return json_response(200, {"entries": self.negotiator.cache.export()})

    def _transfer(self, request: Request, requester: DidId) -> Response:
        try:
            body = request.json()
        except ValueError:
            return _error(400, "body must be JSON")
        with self._lock:
            self.executed.append({"requester": str(requester), "body": body})
            count = len(self.executed)
        return json_response(200, {"status": "executed", "id": count})

    # -- maintenance --------------------------------------------------------

    def refresh_index(self):
        """Re-crawl due registrations; a no-op without an index."""
        if self.index is None:
            return None
        return index_refresh(self.index, self.transport, self.clock, self.sleep)
