"""Local HTTP stand-in for the Student chat endpoint and the reward scorer."""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Mapping, Optional

from .backends import ScriptEntry, ScriptMiss, load_script, resolve_choices
from .reward import stub_reward_vector

logger = logging.getLogger(__name__)


@dataclass
class StubConfig:
    port: int = 0
    script_path: Optional[str] = None
    seed: int = 0
    latency_ms: float = 0.0
    failure_rate: float = 0.0
    host: str = "127.0.0.1"

    def __post_init__(self) -> None:
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError(f"failure_rate must be in [0, 1], got {self.failure_rate}")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")


class StubService:
    """Request handling independent of the HTTP layer.

    Handlers return ``(status, body)``. Failure injection draws from one
    seeded stream, so with sequential clients the failure pattern is
    reproducible.
    """

    def __init__(self, script: Mapping[str, ScriptEntry], config: StubConfig):
        self.script = dict(script)
        self.config = config
        self._fail_rng = random.Random(config.seed)
        self._lock = threading.Lock()
        self.requests = 0
        self.injected_failures = 0

    @classmethod
    def from_config(cls, config: StubConfig) -> "StubService":
        script = load_script(config.script_path) if config.script_path else {}
        return cls(script, config)

    def _maybe_fail(self) -> bool:
        with self._lock:
            self.requests += 1
            fail = self.config.failure_rate > 0 and self._fail_rng.random() < self.config.failure_rate
            if fail:
                self.injected_failures += 1
            return fail

    def handle_chat_completion(self, body: Any) -> tuple[int, dict[str, Any]]:
        if self._maybe_fail():
            return 500, {"error": {"type": "injected_failure", "message": "injected failure"}}
        if not isinstance(body, dict):
            return 400, _error("body must be a JSON object")
        messages = body.get("messages")
        if (not isinstance(messages, list) or not messages
                or not all(isinstance(m, dict) and isinstance(m.get("content"), str) for m in messages)):
            return 400, _error("messages must be a non-empty list of {role, content}")
        try:
            n = int(body.get("n", 1))
            seed = body.get("seed")
            seed = None if seed is None else int(seed)
        except (TypeError, ValueError):
            return 400, _error("n and seed must be integers")
        if n < 1:
            return 400, _error("n must be >= 1")
        try:
            texts = resolve_choices(self.script, messages, n, self.config.seed, seed)
        except ScriptMiss as exc:
            return 422, _error(str(exc), "script_miss")
        return 200, {
            "object": "chat.completion",
            "model": str(body.get("model", "stub")),
            "choices": [
                {"index": i, "message": {"role": "assistant", "content": t}, "finish_reason": "stop"}
                for i, t in enumerate(texts)
            ],
        }

    def handle_reward_score(self, body: Any) -> tuple[int, dict[str, Any]]:
        if self._maybe_fail():
            return 500, {"error": {"type": "injected_failure", "message": "injected failure"}}
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            return 400, _error('body must contain a string "text"')
        vec = stub_reward_vector(body["text"])
        return 200, {"helpful": vec.helpful, "harmless": vec.harmless}


def _error(message: str, kind: str = "invalid_request") -> dict[str, Any]:
    return {"error": {"type": kind, "message": message}}


def _make_handler(service: StubService) -> type[BaseHTTPRequestHandler]:
    routes = {
        "/v1/chat/completions": service.handle_chat_completion,
        "/score": service.handle_reward_score,
    }

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        # headers and body are separate writes; without this each response waits on delayed ACK
        disable_nagle_algorithm = True

        def do_POST(self) -> None:  # noqa: N802
            route = routes.get(self.path.rstrip("/") or "/")
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            if route is None:
                self._send(404, _error(f"no route {self.path}", "not_found"))
                return
            if service.config.latency_ms:
                time.sleep(service.config.latency_ms / 1000.0)
            try:
                body = json.loads(raw or b"null")
            except json.JSONDecodeError:
                self._send(400, _error("body is not valid JSON"))
                return
            self._send(*route(body))

        def _send(self, status: int, payload: Mapping[str, Any]) -> None:
            data = json.dumps(payload, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, fmt: str, *args: Any) -> None:
            logger.debug("%s - %s", self.address_string(), fmt % args)

    return Handler


class StubServer:
    """Threaded server; usable as a context manager that serves in the background."""

    def __init__(self, service: StubService):
        self.service = service
        cfg = service.config
        self.httpd = ThreadingHTTPServer((cfg.host, cfg.port), _make_handler(service))
        self.httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @classmethod
    def from_script(cls, script_path: str | Path, **kw: Any) -> "StubServer":
        return cls(StubService.from_config(StubConfig(script_path=str(script_path), **kw)))

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()
