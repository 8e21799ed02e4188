"""Candidate generation: prompt assembly, output parsing, policy backends.

The scripted backend replays scenario files keyed by (task id, hash of the
committed code prefix), which makes tree search and rollouts fully
reproducible offline. The remote backend speaks the OpenAI-style
chat-completions contract.
"""

from __future__ import annotations

import hashlib
import os
import re
import time
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Protocol, Sequence

import httpx
from pydantic import Field

from .model import CodeStep, FrozenModel, SENTINEL_DEFAULT, Task, ToolDoc

PLACEHOLDER_CODE = "# no executable code block in model output"

_FENCE_RE = re.compile(r"```[ \t]*[A-Za-z0-9_+-]*[ \t]*\n(.*?)```", re.DOTALL)


class NoCodeBlockError(ValueError):
    """Model output carries no fenced code block."""


class ScenarioExhausted(LookupError):
    """The scripted scenario has no entry for this (task, prefix) node."""

    def __init__(self, task_id: str, prefix_hash: str) -> None:
        super().__init__(f"no scripted candidates for task {task_id} at prefix {prefix_hash[:12]}")
        self.task_id = task_id
        self.prefix_hash = prefix_hash


class BackendUnreachableError(RuntimeError):
    """The remote policy backend failed after bounded retries."""


class HistoryEntry(FrozenModel):
    """One committed step as the model sees it: thought, code, full stdout."""

    thought: str = ""
    code: str = ""
    stdout: str = ""


class PromptBundle(FrozenModel):
    system_instruction: str
    tool_docs_rendering: str
    history: list[HistoryEntry] = Field(default_factory=list)
    query: str
    task_id: str

    def committed_codes(self) -> list[str]:
        return [entry.code for entry in self.history]

    def to_messages(self) -> list[dict[str, str]]:
        messages = [
            {"role": "system", "content": self.system_instruction},
            {"role": "user", "content": self.query},
        ]
        for entry in self.history:
            text = entry.thought + ("\n" if entry.thought else "")
            messages.append({"role": "assistant", "content": f"{text}```python\n{entry.code}\n```"})
            messages.append({"role": "user", "content": f"Execution output:\n{entry.stdout}"})
        return messages


def prefix_hash(codes: Sequence[str]) -> str:
    """Stable hash of a committed code prefix (NUL-joined, SHA-256 hex)."""
    joined = "\x00".join(codes)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def _load_template(name: str) -> str:
    return resources.files("codestepper.prompts").joinpath(name).read_text(encoding="utf-8")


def render_tool_docs(toolset: Sequence[ToolDoc]) -> str:
    blocks = []
    for tool in toolset:
        lines = [
            f"- {tool.name} [{tool.http_method.value} {tool.url_template}]",
            f"  category: {tool.category}" if tool.category else None,
            f"  {tool.description}" if tool.description else None,
        ]
        for param in tool.params:
            req = "required" if param.required else "optional"
            lines.append(f"  param {param.name} ({param.kind.value}, {req}): {param.description}")
        blocks.append("\n".join(line for line in lines if line))
    return "\n".join(blocks)


def assemble_prompt(
    task: Task,
    history: Sequence[HistoryEntry],
    sentinel: str = SENTINEL_DEFAULT,
) -> PromptBundle:
    """Build the stepwise prompt; committed stdout is included in full."""
    tool_docs = render_tool_docs(task.toolset)
    instruction = _load_template("stepwise_instruction.txt").format(sentinel=sentinel, tool_docs=tool_docs)
    return PromptBundle(
        system_instruction=instruction,
        tool_docs_rendering=tool_docs,
        history=list(history),
        query=task.query,
        task_id=task.id,
    )


def parse_step(raw: str, step_index: int, token_count: Optional[int] = None) -> CodeStep:
    """Split model output into thought and the first fenced code block."""
    match = _FENCE_RE.search(raw)
    if match is None or not match.group(1).strip():
        raise NoCodeBlockError("model output has no non-empty fenced code block")
    code = match.group(1)
    if code.endswith("\n"):
        code = code[:-1]
    thought = raw[: match.start()].strip()
    return CodeStep(
        step_index=step_index,
        thought=thought,
        code=code,
        raw_model_output=raw,
        token_count=token_count,
    )


@dataclass(frozen=True)
class SampledCandidate:
    """A parsed candidate; ``parse_ok`` is False for protocol_error placeholders."""

    step: CodeStep
    parse_ok: bool


class PolicyBackend(Protocol):
    def generate(self, prompt: PromptBundle, n: int, temperature: float = 0.7, seed: int = 0) -> list[str]: ...


def parse_or_placeholder(raw: str, step_index: int) -> SampledCandidate:
    """Parse one raw output; unparseable text becomes a protocol_error placeholder."""
    try:
        return SampledCandidate(step=parse_step(raw, step_index), parse_ok=True)
    except NoCodeBlockError:
        placeholder = CodeStep(
            step_index=step_index,
            thought=raw.strip(),
            code=PLACEHOLDER_CODE,
            raw_model_output=raw,
        )
        return SampledCandidate(step=placeholder, parse_ok=False)


def sample_candidates(
    backend: PolicyBackend,
    prompt: PromptBundle,
    n: int,
    seed: int = 0,
    temperature: float = 0.7,
    step_index: int = 1,
) -> list[SampledCandidate]:
    """Exactly ``n`` candidates; unparseable outputs become placeholders."""
    if n < 1:
        raise ValueError("n must be >= 1")
    raws = backend.generate(prompt, n, temperature=temperature, seed=seed)
    return [parse_or_placeholder(raw, step_index) for raw in raws[:n]]


class ScriptedPolicy:
    """Replays a scenario map {task_id: {prefix_hash: [raw texts]}}.

    Generation is a pure function of (task_id, prefix hash, ordinal, seed):
    entries shorter than ``n`` are cycled so the candidate count stays
    stable.
    """

    def __init__(self, scenario: dict[str, dict[str, list[str]]]) -> None:
        self._scenario = scenario

    def _entry(self, task_id: str, key: str) -> list[str]:
        candidates = self._scenario.get(task_id, {}).get(key)
        if not candidates:
            raise ScenarioExhausted(task_id, key)
        return candidates

    def generate(self, prompt: PromptBundle, n: int, temperature: float = 0.7, seed: int = 0) -> list[str]:
        entry = self._entry(prompt.task_id, prefix_hash(prompt.committed_codes()))
        return [entry[i % len(entry)] for i in range(n)]

    def candidate_count(self, task_id: str, codes: Sequence[str]) -> int:
        """Number of distinct scripted continuations at this node; 0 when exhausted."""
        try:
            return len(self._entry(task_id, prefix_hash(codes)))
        except ScenarioExhausted:
            return 0


class ScenarioBuilder:
    """Helper for writing scenario files without hand-computing prefix hashes."""

    def __init__(self) -> None:
        self._data: dict[str, dict[str, list[str]]] = {}

    def add(self, task_id: str, prefix_codes: Sequence[str], candidates: Sequence[str]) -> "ScenarioBuilder":
        self._data.setdefault(task_id, {})[prefix_hash(prefix_codes)] = list(candidates)
        return self

    def build(self) -> dict[str, dict[str, list[str]]]:
        return {task: dict(entries) for task, entries in self._data.items()}


def make_candidate_text(thought: str, code: str) -> str:
    """Render a (thought, code) pair the way the policy is asked to format output."""
    prefix = f"{thought}\n" if thought else ""
    return f"{prefix}```python\n{code}\n```"


class RemoteChatPolicy:
    """OpenAI-style chat-completions backend with bounded retries."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "CODESTEPPER_API_KEY",
        client: Optional[httpx.Client] = None,
        max_attempts: int = 3,
        backoff_s: float = 0.5,
        sleep=time.sleep,
    ) -> None:
        self._client = client or httpx.Client(base_url=base_url, timeout=60.0)
        self._model = model
        self._api_key = os.environ.get(api_key_env, "")
        self._max_attempts = max_attempts
        self._backoff_s = backoff_s
        self._sleep = sleep

    def generate(self, prompt: PromptBundle, n: int, temperature: float = 0.7, seed: int = 0) -> list[str]:
        payload = {
            "model": self._model,
            "messages": prompt.to_messages(),
            "n": n,
            "temperature": temperature,
            "seed": seed,
        }
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        last_error = "unknown"
        for attempt in range(self._max_attempts):
            try:
                response = self._client.post("/chat/completions", json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last_error = str(exc)
            else:
                if response.status_code < 500:
                    if response.status_code != 200:
                        raise BackendUnreachableError(f"backend rejected request: HTTP {response.status_code}")
                    texts = [c["message"]["content"] for c in response.json().get("choices", [])]
                    if not texts:
                        raise BackendUnreachableError("backend returned no choices")
                    return [texts[i % len(texts)] for i in range(n)]
                last_error = f"HTTP {response.status_code}"
            if attempt + 1 < self._max_attempts:
                self._sleep(self._backoff_s * (2**attempt))
        raise BackendUnreachableError(f"backend unreachable after {self._max_attempts} attempts: {last_error}")
