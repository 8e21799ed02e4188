"""Final-answer grading: rule-based mock judge, remote judge, SoPR."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Protocol, Sequence

import httpx

from .model import AnswerOracle, AnswerStatus, status_score


class EmptyStatusesError(ValueError):
    """SoPR over an empty status list is undefined."""


@dataclass(frozen=True)
class JudgeVerdict:
    status: AnswerStatus
    rationale: str = ""
    flags: tuple[str, ...] = ()


class JudgeBackend(Protocol):
    def judge(self, query: str, answer: str) -> JudgeVerdict: ...


class RuleBasedJudge:
    """Deterministic oracle-matcher judge.

    All oracle matchers present in the answer -> Solved; some -> Unsure;
    none, or an empty answer -> Unsolved. Without an oracle the verdict is
    Unsure with an audit flag, since nothing can be confirmed either way.
    """

    def __init__(self, oracle: Optional[AnswerOracle]) -> None:
        self._oracle = oracle

    def judge(self, query: str, answer: str) -> JudgeVerdict:
        if not answer.strip():
            return JudgeVerdict(AnswerStatus.Unsolved, rationale="empty answer")
        if self._oracle is None:
            return JudgeVerdict(AnswerStatus.Unsure, rationale="no oracle configured", flags=("no-oracle",))
        matched = [m.pattern for m in self._oracle.matchers if m.matches(answer)]
        if len(matched) == len(self._oracle.matchers):
            return JudgeVerdict(AnswerStatus.Solved, rationale=f"all required matchers present: {matched}")
        if matched:
            return JudgeVerdict(AnswerStatus.Unsure, rationale=f"partial match: {matched}")
        return JudgeVerdict(AnswerStatus.Unsolved, rationale="no required matcher present")


class RemoteJudge:
    """Chat-completions judge rendering the versioned status template.

    An unparseable judgment is retried once and then degrades to Unsure
    with an audit flag instead of failing the whole run.
    """

    def __init__(self, client: httpx.Client, model: str) -> None:
        self._client = client
        self._model = model
        self._template = (
            resources.files("codestepper.prompts").joinpath("judge_status.txt").read_text(encoding="utf-8")
        )

    def _ask(self, query: str, answer: str) -> Optional[JudgeVerdict]:
        prompt = self._template.format(query=query, answer=answer)
        response = self._client.post(
            "/chat/completions",
            json={"model": self._model, "messages": [{"role": "user", "content": prompt}], "temperature": 0.0},
        )
        if response.status_code != 200:
            return None
        try:
            content = response.json()["choices"][0]["message"]["content"]
            data = json.loads(content)
            return JudgeVerdict(AnswerStatus(data["answer_status"]), rationale=str(data.get("content", "")))
        except (KeyError, IndexError, ValueError, TypeError):
            return None

    def judge(self, query: str, answer: str) -> JudgeVerdict:
        for _ in range(2):
            verdict = self._ask(query, answer)
            if verdict is not None:
                return verdict
        return JudgeVerdict(AnswerStatus.Unsure, rationale="judge response unparseable", flags=("unparseable-judge-response",))


def judge_answer(backend: JudgeBackend, query: str, answer: str) -> AnswerStatus:
    return backend.judge(query, answer).status


def sopr(statuses: Sequence[AnswerStatus]) -> float:
    """Solvable pass rate: mean of the fixed status scores."""
    if not statuses:
        raise EmptyStatusesError("no statuses to average")
    return sum(status_score(s) for s in statuses) / len(statuses)
