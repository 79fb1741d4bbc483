"""In-process network of nodes with a message log and byte-recording proxies.

Each node gets a transport bound to its own hostname, so every message in the
log has a sender and a recipient. A proxy placed between two hosts sees the
exact bytes of every request and response that crosses it.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from anp.errors import DuplicateHostnameError
from anp.node.config import NodeConfig
from anp.node.keys import AgentKeys
from anp.node.service import Node
from anp.transport import Request, Response

NO_ROUTE = 599


@dataclass(frozen=True)
class LogEntry:
    sender: str
    recipient: str
    route: str
    size: int
    kind: str
    via: tuple[str, ...] = ()


@dataclass
class Proxy:
    """Relays traffic unchanged and keeps a copy of every byte it saw."""

    name: str
    observed: list[bytes] = field(default_factory=list)

    def relay(self, data: bytes) -> bytes:
        self.observed.append(bytes(data))
        return data

    @property
    def wire(self) -> bytes:
        return b"".join(self.observed)


def request_bytes(request: Request) -> bytes:
    head = f"{request.method} {request.url}\r\n" + "".join(f"{k}: {v}\r\n" for k, v in request.headers.items())
    return head.encode("utf-8") + b"\r\n" + request.body


def response_bytes(response: Response) -> bytes:
    head = f"{response.status}\r\n" + "".join(f"{k}: {v}\r\n" for k, v in response.headers.items())
    return head.encode("utf-8") + b"\r\n" + response.body


class SimTransport:
    def __init__(self, network: "SimNetwork", origin: str) -> None:
        self.network = network
        self.origin = origin

    def send(self, request: Request) -> Response:
        return self.network.deliver(self.origin, request)


class SimNetwork:
    def __init__(self) -> None:
        self.nodes: dict[str, Node] = {}
        self._log: list[LogEntry] = []
        self._proxies: dict[frozenset[str], list[Proxy]] = {}
        self._lock = threading.Lock()

    def transport(self, origin: str) -> SimTransport:
        return SimTransport(self, origin.lower())

    def attach(self, node: Node) -> Node:
        host = node.domain.lower()
        with self._lock:
            if host in self.nodes:
                raise DuplicateHostnameError(f"hostname {host} is already on the network")
            self.nodes[host] = node
        return node

    def add_proxy(self, proxy: Proxy, host_a: str, host_b: str) -> Proxy:
        """Route all traffic between ``host_a`` and ``host_b`` (either direction) through ``proxy``."""
        with self._lock:
            self._proxies.setdefault(frozenset((host_a.lower(), host_b.lower())), []).append(proxy)
        return proxy

    @property
    def message_log(self) -> tuple[LogEntry, ...]:
        with self._lock:
            return tuple(self._log)

    def mark(self) -> int:
        with self._lock:
            return len(self._log)

    def since(self, mark: int) -> tuple[LogEntry, ...]:
        with self._lock:
            return tuple(self._log[mark:])

    def _record(self, entry: LogEntry) -> None:
        with self._lock:
            self._log.append(entry)

    def deliver(self, origin: str, request: Request) -> Response:
        target = request.host
        route = f"{request.method.upper()} {request.path}"
        proxies = self._proxies.get(frozenset((origin, target)), [])
        via = tuple(p.name for p in proxies)
        wire = request_bytes(request)
        for proxy in proxies:
            wire = proxy.relay(wire)
        self._record(LogEntry(origin, target, route, len(wire), "request", via))
        node = self.nodes.get(target)
        if node is None:
            return Response(NO_ROUTE, {}, f"no route to host {target}".encode("utf-8"))
        response = node.handle(request)
        wire = response_bytes(response)
        for proxy in reversed(proxies):
            wire = proxy.relay(wire)
        self._record(LogEntry(target, origin, route, len(wire), "response", via))
        return response


def serve(config: NodeConfig, agents: Iterable[AgentKeys], network: SimNetwork, **node_options) -> Node:
    """Start a node for ``config`` on ``network``; its outbound traffic originates from its own host."""
    node = Node(config, agents, network.transport(config.host), **node_options)
    return network.attach(node)


def connect_network(
    nodes: Iterable[tuple[NodeConfig, Iterable[AgentKeys]]],
    proxies: Mapping[tuple[str, str], Proxy] | None = None,
    **node_options,
) -> SimNetwork:
    """Build a network from ``(config, keys)`` pairs.

    Raises:
        DuplicateHostnameError: two configs share a hostname.
    """
    network = SimNetwork()
    for config, agents in nodes:
        serve(config, agents, network, **node_options)
    for (a, b), proxy in (proxies or {}).items():
        network.add_proxy(proxy, a, b)
    return network
