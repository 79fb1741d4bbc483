"""Serve a :class:`~anp.node.service.Node` over plain HTTP with the stdlib server.

TLS is expected to be terminated in front of the node. Request URLs are
rebuilt as ``https://<Host><path>`` so signatures made for the public URL verify.
"""

from __future__ import annotations

import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from anp.errors import BindFailureError
from anp.node.service import Node
from anp.transport import Request

logger = logging.getLogger(__name__)

MAX_BODY = 1 << 20


def _handler_for(node: Node, public_scheme: str):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "anp-node"

        def _serve(self) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                self.send_error(413)
                return
            body = self.rfile.read(length) if length else b""
            host = self.headers.get("Host") or node.domain
            request = Request(self.command, f"{public_scheme}://{host}{self.path}", dict(self.headers.items()), body)
            response = node.handle(request)
            self.send_response(response.status)
            for key, value in response.headers.items():
                self.send_header(key, value)
            self.send_header("Content-Length", str(len(response.body)))
            self.end_headers()
            self.wfile.write(response.body)

        do_GET = _serve
        do_POST = _serve

        def log_message(self, fmt: str, *args) -> None:
            logger.info("%s %s", self.address_string(), fmt % args)

    return Handler


class NodeServer:
    """A node listening on ``host:port``. Use as a context manager or call ``start``/``stop``."""

    def __init__(self, node: Node, host: str = "127.0.0.1", port: int = 0, public_scheme: str = "https") -> None:
        self.node = node
        try:
            self.httpd = ThreadingHTTPServer((host, port), _handler_for(node, public_scheme))
        except OSError as exc:
            raise BindFailureError(f"cannot listen on {host}:{port}: {exc}") from exc
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def start(self) -> "NodeServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "NodeServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
