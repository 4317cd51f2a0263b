"""Shared fixtures: small flow builders and a scripted local HTTP stub for the remote backend."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import List, Optional, Tuple

import pytest

from data_models import FlowRecord


def make_flow(flow_id: str, label: Optional[str] = "A", proto: str = "TCP|TLS1.2",
              payload: bytes = b"\x01\x02\x03\x04", lengths=(60, 1500, 60), iats=None) -> FlowRecord:
    lengths = tuple(lengths)
    if iats is None:
        iats = tuple(0.01 for _ in range(max(0, len(lengths) - 1)))
    return FlowRecord(
        flow_id=flow_id,
        label=label,
        proto_fine=proto,
        payload=payload,
        pkt_lengths=lengths,
        iat_seconds=tuple(iats),
    )


class StubServer:
    """Replays a script of (status, body) responses and records request bodies."""

    def __init__(self):
        self.script: List[Tuple[int, str]] = []
        self.requests: List[dict] = []
        self.headers: List[dict] = []
        self.delay = 0.0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                stub.requests.append(json.loads(body or b"{}"))
                stub.headers.append(dict(self.headers))
                if stub.delay:
                    threading.Event().wait(stub.delay)
                status, text = stub.script.pop(0) if stub.script else (200, "ANSWER: novel")
                encoded = text.encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Length", str(len(encoded)))
                self.end_headers()
                self.wfile.write(encoded)

            def log_message(self, format, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def start(self):
        self.thread.start()

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    server = StubServer()
    server.start()
    yield server
    server.stop()


@pytest.fixture
def flow_factory():
    return make_flow
