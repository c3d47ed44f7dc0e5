"""Shared fixtures: fixture files on disk and a scriptable local HTTP stub."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


@pytest.fixture
def write_benchmark(tmp_path):
    def _write(rows, name="bench.jsonl"):
        path = tmp_path / name
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
        return path

    return _write


@pytest.fixture
def write_detections(tmp_path):
    def _write(images, name="detections.json"):
        path = tmp_path / name
        path.write_text(json.dumps({"images": images}), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def write_coco(tmp_path):
    def _write(doc, name="instances.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path

    return _write


def chat_reply(text: str, tokens: int = 5) -> dict:
    return {
        "choices": [{"message": {"content": text}}],
        "usage": {"completion_tokens": tokens},
    }


class StubServer:
    """Local HTTP server driven by a script(body, request_index) callable
    returning (status, json payload, delay seconds)."""

    def __init__(self, script):
        self.script = script
        self.requests: list[dict] = []
        owner = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length)
                owner.requests.append(
                    {
                        "path": self.path,
                        "headers": {k.lower(): v for k, v in self.headers.items()},
                        "body": body,
                    }
                )
                status, payload, delay = owner.script(body, len(owner.requests) - 1)
                if delay:
                    time.sleep(delay)
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def start(script) -> StubServer:
        server = StubServer(script)
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.close()
