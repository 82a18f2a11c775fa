"""Minimal HTTP front end over an engine, on the standard library only.

Routes:

    POST /edits   append facts; body is one payload object or {"facts": [...]}
    POST /query   answer a query; body {"query": ..., "alpha"?, "k"?, "mode"?,
                  "trace"?}
    GET  /health  liveness and version

Malformed requests get 400 with {"error": reason}. Query handling sits behind
a semaphore so a flood of requests degrades to queueing, not thrashing.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import __version__
from .engine import Engine
from .errors import FactPatchError
from .memory import payload_from_dict

logger = logging.getLogger(__name__)

MAX_BODY_BYTES = 10 * 1024 * 1024


class ApiServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], engine: Engine, workers: int = 4) -> None:
        super().__init__(address, ApiHandler)
        self.engine = engine
        self.query_slots = threading.BoundedSemaphore(workers)


class ApiHandler(BaseHTTPRequestHandler):
    server: ApiServer
    protocol_version = "HTTP/1.1"

    def log_message(self, format: str, *args) -> None:
        logger.debug("%s - %s", self.address_string(), format % args)

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error(self, status: int, message: str) -> None:
        self._send_json(status, {"error": message})

    def _read_body(self) -> dict | list | None:
        length_header = self.headers.get("Content-Length")
        try:
            length = int(length_header or "")
        except ValueError:
            self._send_error(400, "Content-Length header is required")
            return None
        if length < 0 or length > MAX_BODY_BYTES:
            self._send_error(400, f"body must be 0..{MAX_BODY_BYTES} bytes")
            return None
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            self._send_error(400, f"invalid JSON: {exc.msg}")
            return None

    def do_GET(self) -> None:
        if self.path == "/health":
            self._send_json(200, {"status": "ok", "version": __version__})
        else:
            self._send_error(404, f"unknown path {self.path}")

    def do_POST(self) -> None:
        if self.path == "/edits":
            self._handle_edits()
        elif self.path == "/query":
            self._handle_query()
        else:
            self._send_error(404, f"unknown path {self.path}")

    def _handle_edits(self) -> None:
        body = self._read_body()
        if body is None:
            return
        if isinstance(body, dict) and "facts" in body:
            payloads = body["facts"]
        elif isinstance(body, dict):
            payloads = [body]
        else:
            self._send_error(400, "body must be a fact object or {\"facts\": [...]}")
            return
        if not isinstance(payloads, list) or not payloads:
            self._send_error(400, "facts must be a non-empty list")
            return
        added = []
        try:
            parsed = [payload_from_dict(p) for p in payloads]
        except (FactPatchError, TypeError, AttributeError) as exc:
            self._send_error(400, str(exc))
            return
        for payload in parsed:
            fact = self.server.engine.add_fact(
                payload["subject"],
                payload["relation"],
                payload["new_object"],
                old_object=payload.get("old_object"),
                surface_text=payload.get("surface_text"),
            )
            added.append(fact.to_dict())
        self._send_json(200, {"added": added})

    def _handle_query(self) -> None:
        body = self._read_body()
        if body is None:
            return
        if not isinstance(body, dict) or not isinstance(body.get("query"), str):
            self._send_error(400, "body must be an object with a string \"query\"")
            return
        overrides = {}
        for key, kinds in (("alpha", (int, float)), ("k", (int,)), ("mode", (str,))):
            if key in body:
                if not isinstance(body[key], kinds) or isinstance(body[key], bool):
                    self._send_error(400, f"{key} has the wrong type")
                    return
                overrides[key] = body[key]
        with self.server.query_slots:
            try:
                text, trace = self.server.engine.answer(body["query"], **overrides)
            except FactPatchError as exc:
                self._send_error(400, str(exc))
                return
        reply = {
            "answer": text,
            "fallback_used": trace.fallback_used,
            "selected_fact_ids": list(trace.selected_fact_ids),
        }
        if body.get("trace"):
            reply["trace"] = trace.to_dict()
        self._send_json(200, reply)


def make_server(engine: Engine, host: str = "127.0.0.1", port: int = 0,
                workers: int = 4) -> ApiServer:
    """Bind and return the server; port 0 picks a free port. Call
    serve_forever() (or poke it from a thread in tests) to start handling."""
    return ApiServer((host, port), engine, workers=workers)
