from __future__ import annotations

import json
import threading
from fractions import Fraction
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from weathergen.labels import ClassConfig, ClassInfo
from weathergen.sampler import SamplingTable


def small_config() -> ClassConfig:
    return ClassConfig(
        (
            ClassInfo(0, "road", False),
            ClassInfo(11, "person", True),
            ClassInfo(12, "rider", True),
            ClassInfo(13, "car", True),
            ClassInfo(17, "motorcycle", True),
        )
    )


@pytest.fixture
def cfg() -> ClassConfig:
    return small_config()


def three_class_table() -> SamplingTable:
    """P = {2/3, 2/9, 1/9}, the inverse-share table for E = {0.1, 0.3, 0.6}."""
    return SamplingTable(
        (12, 17, 13),
        ("rider", "motorcycle", "car"),
        (float(Fraction(2, 3)), float(Fraction(2, 9)), float(Fraction(1, 9))),
        "fixture",
    )


@pytest.fixture
def table() -> SamplingTable:
    return three_class_table()


def write_label(path: Path, ids) -> Path:
    arr = np.asarray(ids, dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(path)
    return path


class ScriptedServer:
    """Tiny HTTP server answering POSTs from a list of (status, headers, body) replies.

    The last reply repeats once the script runs out. Received JSON bodies and
    headers are kept in ``requests``.
    """

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(n)
                server.requests.append({"headers": dict(self.headers), "json": json.loads(body or b"null")})
                status, headers, payload = (
                    server.replies.pop(0) if len(server.replies) > 1 else server.replies[0]
                )
                if isinstance(payload, (dict, list)):
                    payload = json.dumps(payload).encode()
                    headers = {"Content-Type": "application/json", **headers}
                elif isinstance(payload, str):
                    payload = payload.encode()
                self.send_response(status)
                for k, v in headers.items():
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


# -- acceptance reporting -----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
