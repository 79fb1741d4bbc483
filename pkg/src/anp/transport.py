"""HTTP-shaped request/response values and the live HTTP client.

The simulated network (``anp.node.sim``) and the live client share these types,
so every layer above speaks the same wire formats in both modes.
"""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol
from urllib.parse import urlsplit, urlunsplit

logger = logging.getLogger(__name__)


@dataclass
class Request:
    method: str
    url: str
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def header(self, name: str) -> str | None:
        lname = name.lower()
        for key, value in self.headers.items():
            if key.lower() == lname:
                return value
        return None

    @property
    def host(self) -> str:
        return urlsplit(self.url).netloc.lower()

    @property
    def path(self) -> str:
        return urlsplit(self.url).path or "/"

    @property
    def query(self) -> str:
        return urlsplit(self.url).query

    def json(self) -> Any:
        return json.loads(self.body.decode("utf-8"))


@dataclass
class Response:
    status: int
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def header(self, name: str) -> str | None:
        lname = name.lower()
        for key, value in self.headers.items():
            if key.lower() == lname:
                return value
        return None

    def json(self) -> Any:
        return json.loads(self.body.decode("utf-8"))


def json_response(status: int, payload: Any, headers: Mapping[str, str] | None = None) -> Response:
    hdrs = {"Content-Type": "application/json"}
    if headers:
        hdrs.update(headers)
    return Response(status, hdrs, json.dumps(payload).encode("utf-8"))


class Transport(Protocol):
    def send(self, request: Request) -> Response: ...


def get(transport: Transport, url: str, headers: Mapping[str, str] | None = None) -> Response:
    return transport.send(Request("GET", url, dict(headers or {})))


def post_json(
    transport: Transport, url: str, payload: Any, headers: Mapping[str, str] | None = None
) -> Response:
    hdrs = {"Content-Type": "application/json"}
    hdrs.update(headers or {})
    return transport.send(Request("POST", url, hdrs, json.dumps(payload).encode("utf-8")))


class HttpTransport:
    """Blocking HTTP client over urllib.

    ``plain_http`` rewrites ``https://`` URLs to ``http://`` before sending; it
    exists for local development against nodes without TLS termination.
    """

    def __init__(self, timeout: float = 10.0, plain_http: bool = False) -> None:
        self.timeout = timeout
        self.plain_http = plain_http

    def send(self, request: Request) -> Response:
        url = request.url
        if self.plain_http:
            parts = urlsplit(url)
            if parts.scheme == "https":
                url = urlunsplit(("http",) + tuple(parts[1:]))
        req = urllib.request.Request(
            url, data=request.body or None, headers=request.headers, method=request.method
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return Response(resp.status, dict(resp.headers.items()), resp.read())
        except urllib.error.HTTPError as exc:
            return Response(exc.code, dict(exc.headers.items()), exc.read())
        except (urllib.error.URLError, OSError) as exc:
            logger.debug("transport failure for %s: %s", url, exc)
            return Response(599, {}, str(exc).encode("utf-8"))
