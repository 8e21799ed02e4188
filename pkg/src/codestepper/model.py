"""Shared domain types: tasks, tool docs, steps, rewards, trajectories.

All models are frozen after construction so they can be shared freely
between concurrent workers. Canonical serialization is key-sorted JSON,
UTF-8, newline-terminated; hashes and fixtures built on it are stable
across runs and platforms.
"""

from __future__ import annotations

import enum
import json
import re
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

SENTINEL_DEFAULT = "FINAL ANSWER:"

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


class SerializationError(ValueError):
    """Raised when a byte stream cannot be decoded into a valid value."""


class HttpMethod(str, enum.Enum):
    GET = "GET"
    POST = "POST"


class ParamKind(str, enum.Enum):
    string = "string"
    integer = "integer"
    number = "number"
    boolean = "boolean"
    array = "array"


class ExecStatus(str, enum.Enum):
    success = "success"
    runtime_error = "runtime_error"
    timeout = "timeout"
    protocol_error = "protocol_error"


class LatentMethod(str, enum.Enum):
    prm = "prm"
    rollout = "rollout"
    constant = "constant"


class AnswerStatus(str, enum.Enum):
    Solved = "Solved"
    Unsure = "Unsure"
    Unsolved = "Unsolved"


_STATUS_SCORES: dict[AnswerStatus, float] = {
    AnswerStatus.Solved: 1.0,
    AnswerStatus.Unsure: 0.5,
    AnswerStatus.Unsolved: 0.0,
}


def status_score(status: AnswerStatus) -> float:
    """Fixed answer-status score mapping: Solved=1.0, Unsure=0.5, Unsolved=0.0."""
    return _STATUS_SCORES[AnswerStatus(status)]


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ParamSpec(FrozenModel):
    """One declared parameter of a tool."""

    name: str = Field(min_length=1)
    kind: ParamKind = ParamKind.string
    required: bool = False
    description: str = ""


class ToolDoc(FrozenModel):
    """Machine-readable protocol for one tool: endpoint, method, parameters."""

    name: str = Field(min_length=1)
    description: str = ""
    category: str = ""
    http_method: HttpMethod = HttpMethod.GET
    url_template: str = Field(min_length=1)
    params: list[ParamSpec] = Field(default_factory=list)

    def placeholders(self) -> list[str]:
        return _PLACEHOLDER_RE.findall(self.url_template)

    def required_params(self) -> list[str]:
        return [p.name for p in self.params if p.required]


class OracleMatcher(FrozenModel):
    pattern: str = Field(min_length=1)
    kind: str = Field(default="substring", pattern="^(substring|regex)$")
    case_insensitive: bool = True

    def matches(self, text: str) -> bool:
        if self.kind == "regex":
            flags = re.IGNORECASE if self.case_insensitive else 0
            return re.search(self.pattern, text, flags) is not None
        if self.case_insensitive:
            return self.pattern.lower() in text.lower()
        return self.pattern in text


class AnswerOracle(FrozenModel):
    """Matcher spec the rule-based judge applies to a final answer.

    All matchers present -> Solved; some -> Unsure; none or empty -> Unsolved.
    """

    matchers: list[OracleMatcher] = Field(min_length=1)


class Task(FrozenModel):
    """A user query plus its candidate toolset."""

    id: str = Field(min_length=1)
    query: str
    toolset: list[ToolDoc] = Field(default_factory=list)
    oracle: Optional[AnswerOracle] = None
    max_depth: int = Field(default=8, ge=1)


def validate_task(task: Task) -> list[str]:
    """Check Task/ToolDoc cross-field invariants; violations are data, not failures."""
    violations: list[str] = []
    if not task.toolset:
        violations.append("empty toolset")
    seen: set[str] = set()
    for tool in task.toolset:
        if tool.name in seen:
            violations.append(f"duplicate tool name: {tool.name}")
        seen.add(tool.name)
        declared = [p.name for p in tool.params]
        for name in declared:
            if declared.count(name) > 1 and f"duplicate param name: {tool.name}.{name}" not in violations:
                violations.append(f"duplicate param name: {tool.name}.{name}")
        for placeholder in tool.placeholders():
            if placeholder not in declared:
                violations.append(f"unbound placeholder: {placeholder}")
    return violations


def whitespace_token_count(text: str) -> int:
    return len(text.split())


class CodeStep(FrozenModel):
    """One generated program for step ``step_index`` with its source text."""

    step_index: int = Field(ge=1)
    thought: str = ""
    code: str = Field(min_length=1)
    raw_model_output: str = ""
    token_count: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _fill_token_count(self) -> "CodeStep":
        # Backend-reported counts are passed explicitly; fallback counts
        # whitespace-separated units of the raw model output.
        if self.token_count is None:
            object.__setattr__(self, "token_count", whitespace_token_count(self.raw_model_output))
        return self


class ExecutionResult(FrozenModel):
    """Outcome of executing one generated program."""

    status: ExecStatus
    stdout: str = ""
    stderr: str = ""
    wall_time_ms: int = Field(default=0, ge=0)
    tool_calls: list[str] = Field(default_factory=list)


class RolloutStats(FrozenModel):
    delta_correct: int = Field(ge=0)
    delta_total: int = Field(ge=1)
    tau: float = Field(ge=0.0)
    raw_lr: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_ratio(self) -> "RolloutStats":
        if self.delta_correct > self.delta_total:
            raise ValueError("delta_correct exceeds delta_total")
        if self.raw_lr != self.delta_correct / self.delta_total:
            raise ValueError("raw_lr must equal delta_correct/delta_total")
        return self


class LatentEstimate(FrozenModel):
    """A step's estimated potential to lead to task completion, in [0, 1]."""

    value: float = Field(ge=0.0, le=1.0)
    method: LatentMethod
    rollout_stats: Optional[RolloutStats] = None

    @model_validator(mode="after")
    def _check_method(self) -> "LatentEstimate":
        if self.method is LatentMethod.rollout and self.rollout_stats is None:
            raise ValueError("rollout method requires rollout_stats")
        return self


class RewardBundle(FrozenModel):
    """Spot reward, latent reward and their exact sum for one candidate."""

    r_spot: int = Field(ge=0, le=1)
    latent: LatentEstimate
    r_total: float

    @model_validator(mode="after")
    def _check_total(self) -> "RewardBundle":
        if self.r_total != self.r_spot + self.latent.value:
            raise ValueError("r_total must equal r_spot + latent.value exactly")
        return self

    @classmethod
    def build(cls, r_spot: int, latent: LatentEstimate) -> "RewardBundle":
        return cls(r_spot=r_spot, latent=latent, r_total=r_spot + latent.value)


class CandidateRecord(FrozenModel):
    step: CodeStep
    exec: ExecutionResult
    rewards: RewardBundle
    selected: bool = False


class StepRecord(FrozenModel):
    """All candidates considered at one step, with the committed one marked."""

    candidates: list[CandidateRecord] = Field(min_length=1)
    selected_index: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_selection(self) -> "StepRecord":
        if self.selected_index >= len(self.candidates):
            raise ValueError("selected_index out of range")
        flags = [c.selected for c in self.candidates]
        if flags.count(True) != 1 or not flags[self.selected_index]:
            raise ValueError("exactly the candidate at selected_index must be selected")
        best = max(c.rewards.r_total for c in self.candidates)
        if self.candidates[self.selected_index].rewards.r_total != best:
            raise ValueError("selected candidate must attain the maximum r_total")
        return self

    @property
    def selected_candidate(self) -> CandidateRecord:
        return self.candidates[self.selected_index]


class Trajectory(FrozenModel):
    """The committed reasoning sequence for one task with all candidate records."""

    task_id: str
    steps: list[StepRecord] = Field(default_factory=list)
    final_answer: str = ""
    answer_status: Optional[AnswerStatus] = None
    depth: int = Field(ge=0)
    total_tokens: int = Field(ge=0)
    answer_provenance: str = Field(default="none", pattern="^(none|sentinel|mock_concat|backend)$")

    @model_validator(mode="after")
    def _check_shape(self) -> "Trajectory":
        if self.depth != len(self.steps):
            raise ValueError("depth must equal the number of step records")
        indices = [s.selected_candidate.step.step_index for s in self.steps]
        if indices != list(range(1, len(self.steps) + 1)):
            raise ValueError("selected step indices must be contiguous from 1")
        tokens = sum(s.selected_candidate.step.token_count or 0 for s in self.steps)
        if self.total_tokens != tokens:
            raise ValueError("total_tokens must equal the sum of selected token counts")
        return self


class HyperParams(FrozenModel):
    """Knobs shared by the engine, the rollout estimator and the collector."""

    alpha: float = Field(default=0.5, gt=0.0, le=1.0)
    beta: float = Field(default=0.9, gt=0.0, le=1.0)
    big_l: float = Field(default=10.0, gt=0.0)
    n_candidates: int = Field(default=2, ge=1)
    n_rollouts: int = Field(default=4, ge=1)
    max_depth: int = Field(default=8, ge=1)
    exec_timeout_ms: int = Field(default=5000, gt=0)
    rng_seed: int = 0


def canonical_json_bytes(data: Any) -> bytes:
    """Key-sorted, compact, newline-terminated UTF-8 JSON."""
    return (json.dumps(data, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")


def serialize_trajectory(traj: Trajectory) -> bytes:
    return canonical_json_bytes(traj.model_dump(mode="json"))


def deserialize_trajectory(raw: bytes | str) -> Trajectory:
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SerializationError(f"not valid UTF-8: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SerializationError(f"malformed trajectory JSON: {exc}") from exc
    try:
        return Trajectory.model_validate(data)
    except ValidationError as exc:
        raise SerializationError(f"invalid trajectory document: {exc}") from exc
