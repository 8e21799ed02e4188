"""Session management, fork-by-replay and the deterministic tool proxy.

Every sandbox session is backed by a runner session. Forking rebuilds a
session's state by replaying its committed code prefix; because all tool
traffic goes through the response cache, replays perform zero outbound
requests once the cache is warm.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from typing import Any, Optional
from urllib.parse import quote

import httpx

from .model import ExecStatus, ExecutionResult, Task, canonical_json_bytes
from .runner import InProcessRunner, RunnerUnavailableError, ToolError


class ReplayDivergenceError(RuntimeError):
    """Replaying a committed prefix produced a different status than recorded."""


class UnknownSessionError(KeyError):
    """Operation on a session this gateway does not own."""


@dataclass
class CommittedStep:
    code: str
    status: ExecStatus
    timeout_ms: int


@dataclass
class SessionHandle:
    """A live sandbox session plus the code prefix that reproduces it."""

    session_id: str
    task_id: str
    committed_prefix: list[CommittedStep] = field(default_factory=list)

    @property
    def committed_codes(self) -> list[str]:
        return [s.code for s in self.committed_prefix]


class ToolResponseCache:
    """Deterministic request-hash -> recorded-response map.

    A hit never triggers an outbound request. Failure responses are cached
    too, so replays reproduce upstream errors without re-contacting the
    service. Supports concurrent readers and exclusive writers.
    """

    def __init__(self) -> None:
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def request_hash(method: str, url: str, query: dict[str, Any], body: Optional[dict]) -> str:
        key = {
            "method": method.upper(),
            "url": url,
            "query": sorted((str(k), str(v)) for k, v in query.items()),
            "body": json.loads(canonical_json_bytes(body)) if body is not None else None,
        }
        return hashlib.sha256(canonical_json_bytes(key)).hexdigest()

    def get(self, key: str) -> Optional[dict]:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self.hits += 1
            return entry

    def put(self, key: str, entry: dict) -> None:
        with self._lock:
            self.misses += 1
            self._entries[key] = entry

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses, "entries": len(self._entries)}


class ExecutionGateway:
    """Owns sandbox sessions and proxies all outbound tool traffic.

    ``tool_client`` is an httpx.Client pointed at the tool universe (live
    or ASGI-mounted). When ``runner`` is omitted an in-process fake runner
    is created with the proxy helper wired in.
    """

    def __init__(
        self,
        tool_client: Optional[httpx.Client] = None,
        runner: Optional[Any] = None,
        cache: Optional[ToolResponseCache] = None,
        sentinel: str = "FINAL ANSWER:",
    ) -> None:
        self._tool_client = tool_client
        self.cache = cache or ToolResponseCache()
        self._runner = runner or InProcessRunner(proxy=self._proxy_call, sentinel=sentinel)
        self._tasks: dict[str, Task] = {}
        self._calls_in_flight: dict[str, list[str]] = {}
        self._counter = 0
        self._request_counter = 0
        self._lock = threading.Lock()

    # -- session lifecycle ----------------------------------------------------

    def _next_request_id(self) -> str:
        with self._lock:
            self._request_counter += 1
            return f"r{self._request_counter}"

    def _runner_request(self, message: dict) -> dict:
        message = dict(message, id=self._next_request_id())
        return self._runner.request(message)

    def open_session(self, task: Task) -> SessionHandle:
        with self._lock:
            self._counter += 1
            session_id = f"{task.id}.s{self._counter}"
        reply = self._runner_request({"op": "create", "session": session_id})
        if not reply.get("ok"):
            raise RunnerUnavailableError(f"runner refused session create: {reply}")
        self._tasks[session_id] = task
        return SessionHandle(session_id=session_id, task_id=task.id)

    def close_session(self, session: SessionHandle) -> None:
        self._tasks.pop(session.session_id, None)
        self._calls_in_flight.pop(session.session_id, None)
        self._runner_request({"op": "destroy", "session": session.session_id})

    def exec_step(self, session: SessionHandle, code: str, timeout_ms: int) -> ExecutionResult:
        if session.session_id not in self._tasks:
            raise UnknownSessionError(session.session_id)
        self._calls_in_flight[session.session_id] = []
        reply = self._runner_request(
            {"op": "exec", "session": session.session_id, "code": code, "timeout_ms": timeout_ms}
        )
        calls = self._calls_in_flight.pop(session.session_id, [])
        if not reply.get("ok"):
            return ExecutionResult(
                status=ExecStatus.protocol_error,
                stderr=str(reply.get("error", "protocol_error")),
                tool_calls=calls,
            )
        return ExecutionResult(
            status=ExecStatus(reply["status"]),
            stdout=reply.get("stdout", ""),
            stderr=reply.get("stderr", ""),
            wall_time_ms=int(reply.get("wall_time_ms", 0)),
            tool_calls=calls,
        )

    def commit_step(self, session: SessionHandle, code: str, status: ExecStatus, timeout_ms: int) -> None:
        """Record an already-executed step as part of the session's state."""
        session.committed_prefix.append(CommittedStep(code=code, status=status, timeout_ms=timeout_ms))

    def fork_session(self, session: SessionHandle) -> SessionHandle:
        """New session with the parent's committed state, built by replay.

        Replay must reproduce each committed step's recorded status (failed
        steps are legal in a committed prefix and must fail identically);
        any mismatch raises ReplayDivergenceError.
        """
        task = self._tasks.get(session.session_id)
        if task is None:
            raise UnknownSessionError(session.session_id)
        fork = self.open_session(task)
        for committed in session.committed_prefix:
            result = self.exec_step(fork, committed.code, committed.timeout_ms)
            if result.status is not committed.status:
                self.close_session(fork)
                raise ReplayDivergenceError(
                    f"replay of session {session.session_id} produced {result.status.value}, "
                    f"recorded {committed.status.value}"
                )
            fork.committed_prefix.append(committed)
        return fork

    # -- tool proxy -------------------------------------------------------------

    def _proxy_call(self, session_id: str, tool_name: str, params: dict) -> Any:
        task = self._tasks.get(session_id)
        if task is None:
            raise ToolError(f"unknown session: {session_id}")
        return self.call_tool(task, tool_name, params, session_id=session_id)

    def call_tool(self, task: Task, tool_name: str, params: dict, session_id: Optional[str] = None) -> Any:
        """Resolve, proxy and cache one tool invocation; returns parsed JSON."""
        tool = next((t for t in task.toolset if t.name == tool_name), None)
        if tool is None:
            raise ToolError(f"unknown tool: {tool_name}")
        missing = [p for p in tool.required_params() if p not in params]
        if missing:
            raise ToolError(f"missing required params for {tool_name}: {', '.join(missing)}")

        url = tool.url_template
        leftover = dict(params)
        for placeholder in tool.placeholders():
            value = leftover.pop(placeholder)
            url = url.replace("{" + placeholder + "}", quote(str(value), safe=""))
        method = tool.http_method.value
        query = leftover if method == "GET" else {}
        body = leftover if method == "POST" else None

        key = ToolResponseCache.request_hash(method, url, query, body)
        if session_id is not None:
            self._calls_in_flight.setdefault(session_id, []).append(key)

        entry = self.cache.get(key)
        if entry is None:
            entry = self._fetch(method, url, query, body, tool_name)
            self.cache.put(key, entry)
        if entry["status_code"] >= 400:
            raise ToolError(f"tool {tool_name} returned HTTP {entry['status_code']}: {entry['body'][:200]}")
        try:
            return json.loads(entry["body"])
        except json.JSONDecodeError:
            return entry["body"]

    def _fetch(self, method: str, url: str, query: dict, body: Optional[dict], tool_name: str) -> dict:
        if self._tool_client is None:
            raise ToolError(f"no tool service configured; cannot reach {tool_name}")
        try:
            response = self._tool_client.request(method, url, params=query or None, json=body)
        except httpx.HTTPError as exc:
            raise ToolError(f"tool {tool_name} unreachable: {exc}") from exc
        headers = {k: v for k, v in response.headers.items() if k.lower() in ("content-type", "retry-after")}
        return {"status_code": response.status_code, "headers": headers, "body": response.text}

    def close(self) -> None:
        self._runner.close()
