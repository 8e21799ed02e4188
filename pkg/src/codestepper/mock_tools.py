"""Deterministic HTTP tool universe for offline runs and tests.

Serves tool docs at GET /docs, per-route request counters at GET /__stats,
and canned JSON responses rendered from scenario templates. Failure modes
(rate limiting, unavailability, oversized payloads) are declared in the
scenario so whole ablation suites replay identically.
"""

from __future__ import annotations

import json
import re
import socket
import threading
import time
from typing import Any, Literal, Optional

import uvicorn
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from pydantic import Field, model_validator

from .model import FrozenModel, ToolDoc

_TEMPLATE_RE = re.compile(r"\{(\w+)\}")


class ResponseRule(FrozenModel):
    """One canned response; the first rule whose match predicate holds wins."""

    match: Optional[dict[str, str]] = None
    status: int = 200
    body: Any = None
    latency_ms: int = 0
    failure_mode: Optional[Literal["rate_limit", "unavailable", "oversized"]] = None
    size_bytes: int = 65536
    critical_key: str = "critical"
    critical_value: str = "SECRET-{q}"


class ScenarioSpec(FrozenModel):
    tools: list[ToolDoc] = Field(min_length=1)
    routes: dict[str, list[ResponseRule]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_reachability(self) -> "ScenarioSpec":
        templates = [t.url_template for t in self.tools]
        for route in self.routes:
            owners = [t for t in templates if t == route]
            if len(owners) != 1:
                raise ValueError(f"route {route} must be reachable from exactly one tool, found {len(owners)}")
        return self


def _render(value: Any, params: dict[str, Any]) -> Any:
    if isinstance(value, str):
        return _TEMPLATE_RE.sub(lambda m: str(params.get(m.group(1), m.group(0))), value)
    if isinstance(value, dict):
        return {k: _render(v, params) for k, v in value.items()}
    if isinstance(value, list):
        return [_render(v, params) for v in value]
    return value


def oversized_payload_body(rule: ResponseRule, params: dict[str, Any]) -> dict[str, Any]:
    """JSON body of at least ``size_bytes`` with the critical value placed
    beyond the first 2,048 bytes, where fixed-length truncation loses it."""
    critical = _render(rule.critical_value, params)
    skeleton = {"note": "oversized payload", "padding": "", rule.critical_key: critical}
    base_len = len(json.dumps(skeleton, ensure_ascii=False, separators=(",", ":")).encode("utf-8"))
    pad_len = max(rule.size_bytes - base_len, 2048 if rule.size_bytes > 0 else 0)
    return {"note": "oversized payload", "padding": "x" * pad_len, rule.critical_key: critical}


class _Stats:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: dict[str, int] = {}

    def bump(self, route: str) -> None:
        with self._lock:
            self._counts[route] = self._counts.get(route, 0) + 1

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            counts = dict(sorted(self._counts.items()))
        return {"routes": counts, "total": sum(counts.values())}


def make_tool_app(scenario: ScenarioSpec) -> FastAPI:
    app = FastAPI(title="mock tool universe", docs_url=None, redoc_url=None, openapi_url=None)
    stats = _Stats()
    app.state.stats = stats

    @app.get("/docs")
    def tool_docs() -> JSONResponse:
        return JSONResponse({"tools": [t.model_dump(mode="json") for t in scenario.tools]})

    @app.get("/__stats")
    def route_stats() -> JSONResponse:
        return JSONResponse(stats.snapshot())

    def make_handler(route: str, rules: list[ResponseRule]):
        async def handler(request: Request) -> Response:
            params: dict[str, Any] = dict(request.path_params)
            params.update(request.query_params)
            if request.method == "POST":
                raw = await request.body()
                if raw:
                    body = json.loads(raw)
                    if isinstance(body, dict):
                        params.update(body)
            stats.bump(route)
            rule = next(
                (r for r in rules if r.match is None or all(str(params.get(k)) == v for k, v in r.match.items())),
                None,
            )
            if rule is None:
                return JSONResponse({"error": "no matching response rule"}, status_code=404)
            if rule.failure_mode == "rate_limit":
                return JSONResponse({"error": "rate_limit"}, status_code=429, headers={"Retry-After": "1"})
            if rule.failure_mode == "unavailable":
                return JSONResponse({"error": "unavailable"}, status_code=503)
            if rule.failure_mode == "oversized":
                return JSONResponse(oversized_payload_body(rule, params), status_code=rule.status)
            return JSONResponse(_render(rule.body, params), status_code=rule.status)

        return handler

    for route, rules in scenario.routes.items():
        methods = {t.http_method.value for t in scenario.tools if t.url_template == route}
        app.add_api_route(route, make_handler(route, rules), methods=sorted(methods))
    return app


class ToolServiceHandle:
    def __init__(self, server: uvicorn.Server, thread: threading.Thread, host: str, port: int) -> None:
        self._server = server
        self._thread = thread
        self.host = host
        self.port = port

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=5.0)


def serve(scenario: ScenarioSpec, host: str = "127.0.0.1", port: int = 0) -> ToolServiceHandle:
    """Run the mock universe over real HTTP; raises OSError if the port is taken."""
    app = make_tool_app(scenario)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    bound_port = sock.getsockname()[1]
    config = uvicorn.Config(app, host=host, port=bound_port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10.0
    while not server.started and thread.is_alive() and time.monotonic() < deadline:
        time.sleep(0.01)
    if not server.started:
        raise RuntimeError("mock tool service failed to start")
    return ToolServiceHandle(server, thread, host, bound_port)


_PRM_HINT_RE = re.compile(r"prm_hint=([0-9]*\.?[0-9]+)")


def hint_scores(candidate: str) -> tuple[float, float]:
    """Scenario-defined PRM scores embedded as ``prm_hint=<x>`` in the text."""
    match = _PRM_HINT_RE.search(candidate)
    if match is None:
        return 0.5, 0.5
    yes = min(max(float(match.group(1)), 0.0), 1.0)
    return yes, 1.0 - yes


def make_prm_app(score_fn=hint_scores) -> FastAPI:
    """Mock PRM service honoring the POST /score contract."""
    app = FastAPI(title="mock PRM service", docs_url=None, redoc_url=None, openapi_url=None)

    @app.post("/score")
    async def score(request: Request) -> JSONResponse:
        payload = await request.json()
        s_yes, s_no = score_fn(str(payload.get("candidate", "")))
        return JSONResponse({"s_yes": s_yes, "s_no": s_no})

    return app
