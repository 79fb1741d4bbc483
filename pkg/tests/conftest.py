from __future__ import annotations

from dataclasses import dataclass, field

import pytest

from anp.clock import ManualClock
from anp.identity import DidDocument, DidId, did_to_https_url
from anp.node.keys import AgentKeys
from anp.transport import Request, Response


@dataclass
class StaticTransport:
    """Serves fixed bodies by URL and counts requests."""

    routes: dict[str, Response] = field(default_factory=dict)
    requests: list[Request] = field(default_factory=list)

    def put(self, url: str, body: bytes, status: int = 200) -> None:
        self.routes[url] = Response(status, {"Content-Type": "application/json"}, body)

    def publish(self, doc: DidDocument) -> None:
        self.put(did_to_https_url(doc.id), doc.serialize())

    def send(self, request: Request) -> Response:
        self.requests.append(request)
        return self.routes.get(request.url, Response(404, {}, b"not found"))


@pytest.fixture
def clock() -> ManualClock:
    return ManualClock()


@pytest.fixture
def web() -> StaticTransport:
    return StaticTransport()


@pytest.fixture
def alice() -> AgentKeys:
    return AgentKeys.generate(DidId("alice.example", ("agents", "alice")))


@pytest.fixture
def bob() -> AgentKeys:
    return AgentKeys.generate(DidId("bob.example"))
