"""HTTP remote-prediction client and a trace-replaying stub server.

Protocol: ``POST /v1/remote/predict`` with ``{"id": str, "payload": any}``;
the response body is the remote observation of the trace schema. Errors
come back as an HTTP status plus ``{"error": str}``. ``GET /healthz``
answers ``{"status": "ok"}``.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

from .trace import ModelObservation, TraceDataset, TraceError, load_trace, observation_from_dict, observation_to_dict

log = logging.getLogger(__name__)

PREDICT_PATH = "/v1/remote/predict"
HEALTH_PATH = "/healthz"


class RemoteError(RuntimeError):
    pass


class RemoteTimeout(RemoteError):
    pass


class RemoteUnavailable(RemoteError):
    """Connection refused or otherwise unreachable."""


class UnknownInput(RemoteError, KeyError):
    def __str__(self) -> str:
        return RuntimeError.__str__(self)


class MalformedResponse(RemoteError):
    pass


@dataclass(frozen=True)
class ClientConfig:
    endpoint: str
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")


class RemoteClient:
    """Fetches remote observations over HTTP. Safe to share between threads.

    Failed calls are never retried: remote predictions are billed per call,
    so failures go straight to the cascade's fallback policy.
    """

    def __init__(self, config: ClientConfig | str):
        if isinstance(config, str):
            config = ClientConfig(config)
        self.config = config
        base = config.endpoint.rstrip("/")
        self._url = base if base.endswith(PREDICT_PATH) else base + PREDICT_PATH

    def predict(self, record_id: str, payload: Any = None) -> ModelObservation:
        body = json.dumps({"id": record_id, "payload": payload}).encode("utf-8")
        request = urllib.request.Request(
            self._url, data=body, method="POST", headers={"Content-Type": "application/json"}
        )
        start = time.perf_counter()
        try:
            with urllib.request.urlopen(request, timeout=self.config.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            message = _error_message(exc)
            if exc.code == 404:
                raise UnknownInput(message) from None
            raise RemoteError(f"HTTP {exc.code}: {message}") from None
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise RemoteTimeout(f"no response within {self.config.timeout}s") from None
            raise RemoteUnavailable(str(exc.reason)) from None
        except (socket.timeout, TimeoutError):
            raise RemoteTimeout(f"no response within {self.config.timeout}s") from None
        except ConnectionError as exc:
            raise RemoteUnavailable(str(exc)) from None
        elapsed = time.perf_counter() - start
        try:
            obs = observation_from_dict(json.loads(raw.decode("utf-8")), "remote")
        except (UnicodeDecodeError, json.JSONDecodeError, TraceError) as exc:
            raise MalformedResponse(f"bad response for {record_id!r}: {exc}") from None
        return replace(obs, latency_s=elapsed)


def _error_message(exc: urllib.error.HTTPError) -> str:
    try:
        return str(json.loads(exc.read().decode("utf-8"))["error"])
    except Exception:
        return exc.reason if isinstance(exc.reason, str) else str(exc)


def remote_predict(client: RemoteClient, record_id: str, payload: Any = None) -> ModelObservation:
    return client.predict(record_id, payload)


# ---------------------------------------------------------------------------
# Stub server


@dataclass(frozen=True)
class StubConfig:
    trace_path: str | Path | None = None
    host: str = "127.0.0.1"
    port: int = 0
    latency_s: float = 0.0

    def __post_init__(self) -> None:
        if self.latency_s < 0:
            raise ValueError("injected latency must be >= 0")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port must lie in [0, 65535], got {self.port}")


class _StubServer(ThreadingHTTPServer):
    daemon_threads = True
    # the socketserver default backlog of 5 resets bursts of concurrent clients
    request_queue_size = 128

    def __init__(self, address, responses: dict[str, bytes | None], latency_s: float):
        self.responses = responses
        self.latency_s = latency_s
        super().__init__(address, _StubHandler)


class _StubHandler(BaseHTTPRequestHandler):
    server: _StubServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route access logs through logging
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str) -> None:
        self._send(status, json.dumps({"error": message}).encode("utf-8"))

    def do_GET(self) -> None:
        if self.path == HEALTH_PATH:
            self._send(200, b'{"status": "ok"}')
        else:
            self._error(404, f"no route {self.path}")

    def do_POST(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        if self.path != PREDICT_PATH:
            self._error(404, f"no route {self.path}")
            return
        try:
            request = json.loads(raw.decode("utf-8"))
            record_id = request["id"]
            if not isinstance(record_id, str):
                raise TypeError
        except Exception:
            self._error(400, "request must be a JSON object with a string 'id'")
            return
        if self.server.latency_s:
            time.sleep(self.server.latency_s)
        if record_id not in self.server.responses:
            self._error(404, f"unknown input {record_id!r}")
            return
        body = self.server.responses[record_id]
        if body is None:
            self._error(404, f"no remote observation for {record_id!r}")
            return
        self._send(200, body)


class StubHandle:
    """A running stub server; use as a context manager or call :meth:`stop`."""

    def __init__(self, server: _StubServer):
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, name="remote-stub", daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        host = self._server.server_address[0]
        return f"http://{host}:{self.port}"

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def wait(self) -> None:
        self._thread.join()

    def __enter__(self) -> "StubHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_stub(config: StubConfig, dataset: TraceDataset | None = None) -> StubHandle:
    """Start a stub answering with the remote blocks of a trace.

    Responses are pre-serialized at start-up, so they depend only on the
    trace and the requested id.
    """
    if dataset is None:
        if config.trace_path is None:
            raise ValueError("stub needs a trace path or a dataset")
        dataset = load_trace(config.trace_path)
    responses = {
        r.id: None if r.remote is None else json.dumps(observation_to_dict(r.remote)).encode("utf-8")
        for r in dataset.records
    }
    server = _StubServer((config.host, config.port), responses, config.latency_s)
    return StubHandle(server)
