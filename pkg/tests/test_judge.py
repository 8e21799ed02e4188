from __future__ import annotations

import json

import httpx
import pytest
from hypothesis import given, strategies as st

from codestepper.judge import EmptyStatusesError, RemoteJudge, RuleBasedJudge, judge_answer, sopr
from codestepper.model import AnswerOracle, AnswerStatus, OracleMatcher


def oracle(*patterns, kind="substring"):
    return AnswerOracle(matchers=[OracleMatcher(pattern=p, kind=kind) for p in patterns])


class TestRuleBasedJudge:
    def test_all_matchers_solved(self):
        judge = RuleBasedJudge(oracle("Paris"))
        assert judge.judge("capital of France?", "The capital is Paris").status is AnswerStatus.Solved

    def test_partial_match_unsure(self):
        judge = RuleBasedJudge(oracle("A", "B"))
        assert judge.judge("q", "only A here").status is AnswerStatus.Unsure

    def test_empty_answer_unsolved(self):
        judge = RuleBasedJudge(oracle("A"))
        assert judge.judge("q", "").status is AnswerStatus.Unsolved

    def test_no_match_unsolved(self):
        judge = RuleBasedJudge(oracle("zebra"))
        assert judge.judge("q", "nothing relevant").status is AnswerStatus.Unsolved

    def test_case_insensitive_by_default(self):
        judge = RuleBasedJudge(oracle("PARIS"))
        assert judge.judge("q", "paris").status is AnswerStatus.Solved

    def test_regex_matcher(self):
        judge = RuleBasedJudge(oracle(r"\b42\b", kind="regex"))
        assert judge.judge("q", "it is 42.").status is AnswerStatus.Solved

    def test_no_oracle_degrades_to_unsure(self):
        verdict = RuleBasedJudge(None).judge("q", "some answer")
        assert verdict.status is AnswerStatus.Unsure
        assert "no-oracle" in verdict.flags

    def test_deterministic(self):
        judge = RuleBasedJudge(oracle("x"))
        assert judge.judge("q", "x!") == judge.judge("q", "x!")


class _JudgeTransport(httpx.BaseTransport):
    def __init__(self, contents):
        self.contents = list(contents)

    def handle_request(self, request):
        content = self.contents.pop(0)
        return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


class TestRemoteJudge:
    def make_judge(self, contents):
        client = httpx.Client(transport=_JudgeTransport(contents), base_url="http://judge.local")
        return RemoteJudge(client, model="judge-1")

    def test_parses_answer_status(self):
        judge = self.make_judge([json.dumps({"content": "looks complete", "answer_status": "Solved"})])
        verdict = judge.judge("q", "a")
        assert verdict.status is AnswerStatus.Solved
        assert verdict.rationale == "looks complete"

    def test_unparseable_retried_then_unsure(self):
        judge = self.make_judge(["garbage", "also garbage"])
        verdict = judge.judge("q", "a")
        assert verdict.status is AnswerStatus.Unsure
        assert "unparseable-judge-response" in verdict.flags

    def test_retry_recovers(self):
        judge = self.make_judge(["garbage", json.dumps({"answer_status": "Unsolved"})])
        assert judge.judge("q", "a").status is AnswerStatus.Unsolved


class TestSopr:
    def test_mixed(self):
        statuses = [AnswerStatus.Solved, AnswerStatus.Unsure, AnswerStatus.Unsolved, AnswerStatus.Solved]
        assert sopr(statuses) == 0.625

    def test_all_solved(self):
        assert sopr([AnswerStatus.Solved] * 3) == 1.0

    def test_all_unsolved(self):
        assert sopr([AnswerStatus.Unsolved] * 2) == 0.0

    def test_empty_errors(self):
        with pytest.raises(EmptyStatusesError):
            sopr([])

    @given(st.lists(st.sampled_from(list(AnswerStatus)), min_size=1, max_size=30))
    def test_bounded_and_permutation_invariant(self, statuses):
        value = sopr(statuses)
        assert 0.0 <= value <= 1.0
        assert value == sopr(list(reversed(statuses)))


def test_judge_answer_returns_status():
    assert judge_answer(RuleBasedJudge(oracle("ok")), "q", "ok!") is AnswerStatus.Solved
