"""Client side of the node routes: signing, token reuse, sessions, negotiation."""

from __future__ import annotations

import json
import logging
import threading
from typing import Any, Mapping, Sequence
from urllib.parse import quote, urlencode, urlsplit

from anp.auth import (
    HUMAN_AUTHORIZATION_HEADER,
    TOKEN_HEADER,
    sign_human_confirmation,
    sign_request,
)
from anp.clock import Clock, system_clock
from anp.description import AdDocument, parse_agent_description, verify_description
from anp.discovery import RegistrationOutcome
from anp.e2e import (
    Envelope,
    HandshakeReply,
    Session,
    complete_handshake,
    decrypt,
    encrypt,
    initiate_handshake,
)
from anp.errors import AnpError, DescriptionError, E2eError, NegotiationError, SchemaViolationError
from anp.identity import DidId, DidResolver
from anp.metaproto import (
    NegotiationMessage,
    NegotiationResult,
    Negotiator,
    ProtocolDescriptor,
    Requirement,
    negotiate_locally,
)
from anp.node.config import HANDSHAKE, MESSAGE, NEGOTIATE, REGISTER, SEARCH
from anp.node.keys import AgentKeys
from anp.transport import Request, Response, Transport, get

logger = logging.getLogger(__name__)

_TOKEN_MARGIN = 5


def endpoint(host: str, route: str) -> str:
    """``https://host/path`` for a route key such as ``"POST /anp/message"``."""
    return f"https://{host}{route.split(' ', 1)[1]}"


def strip_to_schema(payload: Mapping[str, Any], descriptor: ProtocolDescriptor) -> dict[str, Any]:
    """Keep only the fields the agreed protocol declares.

    Raises:
        SchemaViolationError: a required field is missing.
    """
    missing = [f.name for f in descriptor.message_schema if f.required and f.name not in payload]
    if missing:
        raise SchemaViolationError(f"missing required fields: {', '.join(missing)}")
    allowed = descriptor.field_names()
    dropped = sorted(k for k in payload if k not in allowed)
    if dropped:
        logger.warning("withholding fields outside the agreed schema: %s", ", ".join(dropped))
    return {k: v for k, v in payload.items() if k in allowed}


class AgentClient:
    """Acts for one agent towards other nodes.

    The first request to a host is signed; the token that comes back is used
    for later requests to that host until it nears expiry.
    """

    def __init__(
        self,
        keys: AgentKeys,
        transport: Transport,
        clock: Clock = system_clock,
        resolver: DidResolver | None = None,
        use_tokens: bool = True,
    ) -> None:
        self.keys = keys
        self.transport = transport
        self.clock = clock
        self.resolver = resolver or DidResolver(transport, clock)
        self.use_tokens = use_tokens
        self.sessions: dict[DidId, Session] = {}
        self._tokens: dict[str, tuple[str, int]] = {}
        self._lock = threading.Lock()

    @property
    def did(self) -> DidId:
        return self.keys.did

    def token_for(self, host: str) -> str | None:
        entry = self._tokens.get(host)
        if entry and entry[1] - _TOKEN_MARGIN > self.clock():
            return entry[0]
        return None

    def forget_tokens(self) -> None:
        self._tokens.clear()

    def request(
        self,
        method: str,
        url: str,
        body: bytes = b"",
        headers: Mapping[str, str] | None = None,
        *,
        human_confirmation: bool = False,
    ) -> Response:
        host = urlsplit(url).netloc.lower()
        hdrs = dict(headers or {})
        if human_confirmation:
            if self.keys.human_key is None:
                raise AnpError("this agent holds no human-authorization key")
            route = f"{method.upper()} {urlsplit(url).path or '/'}"
            conf = sign_human_confirmation(self.did, self.keys.human_key, route, self.clock)
            hdrs[HUMAN_AUTHORIZATION_HEADER] = conf.to_header()
        token = self.token_for(host) if self.use_tokens else None
        if token:
            hdrs["Authorization"] = f"Bearer {token}"
        else:
            hdrs["Authorization"] = sign_request(self.did, self.keys.auth_key, method, url, self.clock).to_header()
        resp = self.transport.send(Request(method.upper(), url, hdrs, body))
        if token and resp.status == 401:
            self._tokens.pop(host, None)
            return self.request(method, url, body, headers, human_confirmation=human_confirmation)
        issued = resp.header(TOKEN_HEADER)
        if issued:
            try:
                data = json.loads(issued)
                self._tokens[host] = (str(data["token"]), int(data["expiresAt"]))
            except (ValueError, KeyError, TypeError):
                pass
        return resp

    def post_json(self, url: str, payload: Any, **kw) -> Response:
        return self.request("POST", url, json.dumps(payload).encode("utf-8"), {"Content-Type": "application/json"}, **kw)

    # -- documents ------------------------------------------------------------

    def fetch_description(self, url: str, allow_insecure: bool = False) -> AdDocument:
        """Fetch, parse and verify an AD document.

        Raises:
            DescriptionError: unreachable, invalid, or failing verification.
        """
        resp = get(self.transport, url, {"Accept": "application/ld+json"})
        if not resp.ok:
            raise DescriptionError(f"fetching {url} returned {resp.status}")
        doc = parse_agent_description(resp.body, allow_insecure)
        if doc.id != url:
            raise DescriptionError(f"document at {url} claims id {doc.id}")
        check = verify_description(doc, self.resolver)
        if not check.verified:
            raise DescriptionError(f"verification failed: {check.reason}")
        return doc

    # -- negotiation ----------------------------------------------------------

    def negotiate(
        self,
        host: str,
        requirement: Requirement,
        candidates: Sequence[ProtocolDescriptor],
        negotiator: Negotiator,
        vectors: Sequence[tuple[Any, Any]],
    ) -> NegotiationResult:
        url = endpoint(host, NEGOTIATE)

        def exchange(msg: NegotiationMessage) -> NegotiationMessage | None:
            resp = self.post_json(url, msg.to_json())
            if not resp.ok:
                raise NegotiationError(f"negotiation request failed with HTTP {resp.status}: {resp.body[:200]!r}")
            out = resp.json().get("message")
            return NegotiationMessage.from_json(out) if out is not None else None

        return negotiate_locally(requirement, candidates, negotiator, None, vectors, exchange=exchange)

    # -- end-to-end channel ---------------------------------------------------

    def handshake(self, peer: DidId) -> Session:
        """Open an encrypted session with ``peer`` via its node.

        Raises:
            E2eError: the peer's reply does not verify.
            AnpError: resolution or transport failure.
        """
        peer_doc = self.resolver(peer)
        msg, pending = initiate_handshake(self.keys.local_identity, peer_doc)
        resp = self.post_json(endpoint(peer.host, HANDSHAKE), msg.to_json())
        if not resp.ok:
            raise E2eError(f"handshake rejected with HTTP {resp.status}: {resp.body[:200]!r}")
        session = complete_handshake(pending, HandshakeReply.from_json(resp.json()), peer_doc)
        with self._lock:
            self.sessions[peer] = session
        return session

    def send(self, peer: DidId, plaintext: bytes) -> bytes:
        """Encrypt, deliver, and decrypt the peer's reply. Opens a session if needed."""
        session = self.sessions.get(peer) or self.handshake(peer)
        envelope = encrypt(session, plaintext)
        resp = self.request(
            "POST", endpoint(peer.host, MESSAGE), envelope.to_bytes(), {"Content-Type": "application/octet-stream"}
        )
        if not resp.ok:
            raise E2eError(f"message rejected with HTTP {resp.status}: {resp.body[:200]!r}")
        return decrypt(session, Envelope.from_bytes(resp.body))

    def send_json(self, peer: DidId, payload: Mapping[str, Any], descriptor: ProtocolDescriptor) -> Any:
        """Send only the fields ``descriptor`` declares; undeclared fields never leave this process."""
        body = json.dumps(strip_to_schema(payload, descriptor), sort_keys=True).encode("utf-8")
        return json.loads(self.send(peer, body))

    # -- passive discovery ----------------------------------------------------

    def register(self, index_host: str, ad_url: str) -> RegistrationOutcome:
        resp = self.post_json(endpoint(index_host, REGISTER), {"adUrl": ad_url})
        if resp.status == 201:
            return RegistrationOutcome(True)
        if resp.status == 409:
            return RegistrationOutcome(False, "duplicate")
        if resp.status == 401:
            return RegistrationOutcome(False, "unauthenticated")
        return RegistrationOutcome(False, f"HTTP {resp.status}")

    def search(self, index_host: str, terms: Sequence[str], limit: int = 10) -> list[tuple[str, int]]:
        query = urlencode({"q": " ".join(terms), "limit": limit}, quote_via=quote)
        resp = self.request("GET", f"{endpoint(index_host, SEARCH)}?{query}")
        if not resp.ok:
            raise AnpError(f"search failed with HTTP {resp.status}")
        return [(r["adUrl"], r["score"]) for r in resp.json()["results"]]
