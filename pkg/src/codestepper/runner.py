"""Sandbox runner protocol and the in-process fake runner.

Wire format (shared with external worker processes): one JSON object per
newline-terminated UTF-8 line. Requests carry an ``op`` plus a caller
supplied ``id`` which every response echoes:

    {"op": "hello", "version": 1}            -> {"ok": true, "version": 1}
    {"op": "create", "session": ID}          -> {"ok": true}
    {"op": "exec", "session": ID,
     "code": S, "timeout_ms": N}             -> {"ok": true, "status": "...",
                                                 "stdout": S, "stderr": S,
                                                 "wall_time_ms": N}
    {"op": "destroy", "session": ID}         -> {"ok": true}
    {"op": "shutdown"}                       -> {"ok": true}

The in-process fake runner speaks this protocol verbatim (line in, line
out) so the whole stack can be tested without a worker process. Its
reported ``wall_time_ms`` is deterministic: 0 for completed executions and
exactly ``timeout_ms`` for timeouts, which keeps serialized trajectories
byte-identical across runs.
"""

from __future__ import annotations

import ctypes
import io
import json
import subprocess
import sys
import threading
import time
import traceback
from typing import Any, Callable, Optional, Protocol

PROTOCOL_VERSION = 1

ProxyFn = Callable[[str, str, dict], Any]


class RunnerUnavailableError(RuntimeError):
    """The runner process or handler cannot be reached."""


class RunnerProtocolError(RuntimeError):
    """The peer violated the line-delimited JSON protocol."""


class ToolError(Exception):
    """Raised inside sandbox code when a tool invocation fails; catchable."""


class SandboxTimeout(BaseException):
    """Injected asynchronously into sandbox code at the execution deadline.

    Derives from BaseException so sandbox-level ``except Exception`` cannot
    swallow the interrupt.
    """


def encode_message(message: dict) -> str:
    return json.dumps(message, ensure_ascii=False) + "\n"


def decode_message(line: str) -> dict:
    try:
        message = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RunnerProtocolError(f"malformed protocol line: {exc}") from exc
    if not isinstance(message, dict):
        raise RunnerProtocolError("protocol message must be a JSON object")
    return message


class _ThreadOutputRouter(io.TextIOBase):
    """Routes writes to per-thread buffers, passing other threads through.

    Installed once over sys.stdout/sys.stderr; sandbox threads register a
    buffer for the duration of an exec. A thread that outlives its timeout
    keeps writing into its detached buffer instead of the host stream.
    """

    def __init__(self, fallback: Any) -> None:
        self._fallback = fallback
        self._buffers: dict[int, io.StringIO] = {}
        self._lock = threading.Lock()

    def register(self, thread_id: int, buffer: io.StringIO) -> None:
        with self._lock:
            self._buffers[thread_id] = buffer

    def unregister(self, thread_id: int) -> None:
        with self._lock:
            self._buffers.pop(thread_id, None)

    def _target(self) -> Any:
        return self._buffers.get(threading.get_ident(), self._fallback)

    def write(self, text: str) -> int:
        return self._target().write(text)

    def flush(self) -> None:
        target = self._target()
        if hasattr(target, "flush"):
            target.flush()

    def writable(self) -> bool:
        return True


_router_lock = threading.Lock()
_stdout_router: Optional[_ThreadOutputRouter] = None
_stderr_router: Optional[_ThreadOutputRouter] = None


def _install_routers() -> tuple[_ThreadOutputRouter, _ThreadOutputRouter]:
    global _stdout_router, _stderr_router
    with _router_lock:
        if _stdout_router is None or sys.stdout is not _stdout_router:
            _stdout_router = _ThreadOutputRouter(sys.stdout)
            sys.stdout = _stdout_router
        if _stderr_router is None or sys.stderr is not _stderr_router:
            _stderr_router = _ThreadOutputRouter(sys.stderr)
            sys.stderr = _stderr_router
        return _stdout_router, _stderr_router


def _async_raise(thread_id: int, exc_type: type[BaseException]) -> None:
    ctypes.pythonapi.PyThreadState_SetAsyncExc(ctypes.c_long(thread_id), ctypes.py_object(exc_type))


class InProcessRunner:
    """Executes generated code in isolated per-session namespaces.

    ``proxy`` is the gateway callback servicing the injected ``call_tool``
    helper; it receives (session_id, tool_name, params) and returns the
    parsed JSON response body or raises ToolError.
    """

    def __init__(self, proxy: Optional[ProxyFn] = None, sentinel: str = "FINAL ANSWER:") -> None:
        self._proxy = proxy
        self._sentinel = sentinel
        self._sessions: dict[str, dict] = {}
        self._closed = False

    # -- protocol surface ----------------------------------------------------

    def handle_line(self, line: str) -> str:
        try:
            message = decode_message(line)
        except RunnerProtocolError:
            return encode_message({"ok": False, "error": "protocol_error"})
        return encode_message(self.handle(message))

    def handle(self, message: dict) -> dict:
        reply: dict[str, Any] = {}
        if "id" in message:
            reply["id"] = message["id"]
        if self._closed:
            reply.update(ok=False, error="shutdown")
            return reply
        op = message.get("op")
        handler = {
            "hello": self._op_hello,
            "create": self._op_create,
            "exec": self._op_exec,
            "destroy": self._op_destroy,
            "shutdown": self._op_shutdown,
        }.get(op)
        if handler is None:
            reply.update(ok=False, error="protocol_error")
            return reply
        reply.update(handler(message))
        return reply

    def request(self, message: dict) -> dict:
        """Transport-style entry point; round-trips through the wire format."""
        return decode_message(self.handle_line(encode_message(message)))

    def close(self) -> None:
        self._sessions.clear()
        self._closed = True

    # -- operations ----------------------------------------------------------

    def _op_hello(self, message: dict) -> dict:
        return {"ok": True, "version": PROTOCOL_VERSION}

    def _op_create(self, message: dict) -> dict:
        session_id = message.get("session")
        if not isinstance(session_id, str) or not session_id:
            return {"ok": False, "error": "protocol_error"}
        if session_id in self._sessions:
            return {"ok": False, "error": "session_exists"}
        self._sessions[session_id] = self._new_namespace(session_id)
        return {"ok": True}

    def _op_destroy(self, message: dict) -> dict:
        session_id = message.get("session")
        if session_id not in self._sessions:
            return {"ok": False, "error": "no_such_session"}
        del self._sessions[session_id]
        return {"ok": True}

    def _op_shutdown(self, message: dict) -> dict:
        self.close()
        self._closed = True
        return {"ok": True}

    def _op_exec(self, message: dict) -> dict:
        session_id = message.get("session")
        namespace = self._sessions.get(session_id)
        if namespace is None:
            return {"ok": False, "error": "no_such_session"}
        code = message.get("code")
        if not isinstance(code, str):
            return {"ok": False, "error": "protocol_error"}
        timeout_ms = message.get("timeout_ms", 30_000)
        if not isinstance(timeout_ms, int) or timeout_ms <= 0:
            return {"ok": False, "error": "protocol_error"}
        status, stdout, stderr = self._execute(namespace, code, timeout_ms)
        wall_time_ms = timeout_ms if status == "timeout" else 0
        return {
            "ok": True,
            "status": status,
            "stdout": stdout,
            "stderr": stderr,
            "wall_time_ms": wall_time_ms,
        }

    # -- execution machinery ---------------------------------------------------

    def _new_namespace(self, session_id: str) -> dict:
        namespace: dict[str, Any] = {"__name__": f"sandbox_{session_id}", "__builtins__": __builtins__}
        namespace["ToolError"] = ToolError
        if self._proxy is not None:
            proxy = self._proxy

            def call_tool(tool_name: str, params: Optional[dict] = None) -> Any:
                return proxy(session_id, tool_name, dict(params or {}))

            namespace["call_tool"] = call_tool
        sentinel = self._sentinel

        def final_answer(answer: Any) -> None:
            print(f"{sentinel} {answer}")

        namespace["final_answer"] = final_answer
        return namespace

    def _execute(self, namespace: dict, code: str, timeout_ms: int) -> tuple[str, str, str]:
        stdout_router, stderr_router = _install_routers()
        out_buffer, err_buffer = io.StringIO(), io.StringIO()
        result: dict[str, Any] = {"status": "success"}
        started = threading.Event()

        def run() -> None:
            stdout_router.register(threading.get_ident(), out_buffer)
            stderr_router.register(threading.get_ident(), err_buffer)
            started.set()
            try:
                exec(compile(code, "<step>", "exec"), namespace)
            except SandboxTimeout:
                result["status"] = "timeout"
            except BaseException:
                result["status"] = "runtime_error"
                err_buffer.write(traceback.format_exc())

        thread = threading.Thread(target=run, daemon=True)
        thread.start()
        started.wait()
        thread.join(timeout_ms / 1000.0)
        if thread.is_alive():
            result["status"] = "timeout"
            _async_raise(thread.ident, SandboxTimeout)
            thread.join(1.0)
        return result["status"], out_buffer.getvalue(), err_buffer.getvalue()


class RunnerTransport(Protocol):
    def request(self, message: dict) -> dict: ...

    def close(self) -> None: ...


class SubprocessRunnerTransport:
    """Speaks the runner protocol to a worker process over its stdio pipes."""

    def __init__(self, command: list[str], env: Optional[dict[str, str]] = None) -> None:
        try:
            self._proc = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                env=env,
            )
        except OSError as exc:
            raise RunnerUnavailableError(f"cannot spawn runner: {exc}") from exc
        hello = self.request({"op": "hello", "version": PROTOCOL_VERSION, "id": "hello-0"})
        if not hello.get("ok"):
            raise RunnerUnavailableError(f"runner handshake failed: {hello}")

    def request(self, message: dict) -> dict:
        proc = self._proc
        if proc.poll() is not None:
            raise RunnerUnavailableError("runner process has exited")
        try:
            proc.stdin.write(encode_message(message))
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise RunnerUnavailableError(f"runner pipe broken: {exc}") from exc
        if not line:
            raise RunnerUnavailableError("runner closed its output stream")
        reply = decode_message(line)
        want = message.get("id")
        if want is not None and reply.get("id") not in (None, want):
            raise RunnerProtocolError(f"response id {reply.get('id')!r} does not match request {want!r}")
        return reply

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.write(encode_message({"op": "shutdown", "id": "shutdown-0"}))
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError):
                pass
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()


def wait_for_output(proc: subprocess.Popen, deadline_s: float) -> None:
    # Drain helper for tests that need a bounded wait on worker exit.
    end = time.monotonic() + deadline_s
    while proc.poll() is None and time.monotonic() < end:
        time.sleep(0.01)
