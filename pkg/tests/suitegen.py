"""Scenario/suite generators used by harness, service and acceptance tests.

All generators are deterministic. Mock PRM scores ride inside candidate
texts as ``prm_hint=<x>`` markers, which the hint-based PRM service reads
back out; that is how scripted suites steer latent scores.
"""

from __future__ import annotations

from codestepper.harness import BenchmarkSuite, RunConfig
from codestepper.engine import EngineConfig
from codestepper.model import AnswerOracle, HyperParams, OracleMatcher, Task
from codestepper.policy import ScenarioBuilder, make_candidate_text

from conftest import bigdoc_tool, limited_tool, search_tool, weather_tool

BROKEN = "raise ValueError('dead end')"


def _task(task_id: str, query: str, oracle_terms: tuple[str, ...], max_depth: int = 6, subset_tools=None) -> Task:
    return Task(
        id=task_id,
        query=query,
        toolset=subset_tools or [weather_tool(), search_tool(), bigdoc_tool(), limited_tool()],
        oracle=AnswerOracle(matchers=[OracleMatcher(pattern=t) for t in oracle_terms]),
        max_depth=max_depth,
    )


def hinted(thought: str, code: str, hint: float) -> str:
    return make_candidate_text(f"{thought} prm_hint={hint}", code)


def make_selection_suite(n_tasks: int = 20):
    """Per step: one executable on-path candidate plus one broken candidate.

    Used with constant-zero latent; the spot reward alone identifies the
    good path.
    """
    tasks, labels = [], {}
    builder = ScenarioBuilder()
    for i in range(n_tasks):
        task_id = f"sel-{i:02d}"
        term = f"value-{i}"
        fetch = f"v = call_tool('weather', {{'city': 'city{i}'}})['temp_c']\nprint('fetched', v)"
        finish = f"print('FINAL ANSWER: {term} is', v)"
        builder.add(task_id, [], [make_candidate_text("fetch data", fetch), make_candidate_text("oops", BROKEN)])
        builder.add(task_id, [fetch], [make_candidate_text("finish", finish), make_candidate_text("oops", BROKEN)])
        tasks.append(_task(task_id, f"what is {term}?", (term,)))
        labels[task_id] = f"subset-{i % 2}"
    suite = BenchmarkSuite(tasks=tasks, labels=labels)
    config = RunConfig(engine=EngineConfig(latent_mode="constant_zero", hp=HyperParams(n_candidates=2, max_depth=6)))
    return suite, builder.build(), config


def make_ablation_suite(n_clean: int = 12, n_trap: int = 8):
    """Mixed suite for the spot-reward ablation direction.

    Clean tasks solve under any selection rule. Trap tasks carry a broken
    first candidate the mock PRM overrates (prm_hint 0.9 vs the good
    path's 0.6): with the spot reward on, executability overrules the
    PRM; with it off, selection follows the PRM into the trap and the
    task dead-ends.
    """
    tasks, labels = [], {}
    builder = ScenarioBuilder()

    def add_clean(task_id: str, term: str) -> None:
        work = f"data = call_tool('search', {{'q': '{term}'}})['hits']\nprint(data)"
        finish = f"print('FINAL ANSWER: {term} found', data[0])"
        builder.add(task_id, [], [hinted("work", work, 0.6), hinted("bad", BROKEN, 0.2)])
        builder.add(task_id, [work], [hinted("finish", finish, 0.6), hinted("bad", BROKEN, 0.2)])

    def add_trap(task_id: str, term: str) -> None:
        work = f"data = call_tool('search', {{'q': '{term}'}})['hits']\nprint(data)"
        finish = f"print('FINAL ANSWER: {term} found', data[0])"
        trap = "raise RuntimeError('tempting but broken')"
        builder.add(task_id, [], [hinted("trap", trap, 0.9), hinted("work", work, 0.6)])
        builder.add(task_id, [work], [hinted("finish", finish, 0.6), hinted("bad", BROKEN, 0.2)])
        # inside the trap branch everything stays broken and overrated
        builder.add(task_id, [trap], [hinted("trap2", trap, 0.9), hinted("bad", BROKEN, 0.7)])
        builder.add(task_id, [trap, trap], [hinted("trap3", trap, 0.9), hinted("bad", BROKEN, 0.7)])

    for i in range(n_clean):
        task_id = f"clean-{i:02d}"
        term = f"clean-term-{i}"
        add_clean(task_id, term)
        tasks.append(_task(task_id, f"find {term}", (term,), max_depth=3))
        labels[task_id] = "clean"
    for i in range(n_trap):
        task_id = f"trap-{i:02d}"
        term = f"trap-term-{i}"
        add_trap(task_id, term)
        tasks.append(_task(task_id, f"find {term}", (term,), max_depth=3))
        labels[task_id] = "trap"

    suite = BenchmarkSuite(tasks=tasks, labels=labels)
    config = RunConfig(engine=EngineConfig(latent_mode="prm", hp=HyperParams(n_candidates=2, max_depth=3)))
    return suite, builder.build(), config


def make_batch_suite(n_tasks: int = 5, n_calls: int = 4):
    """Request-intensive tasks a loop satisfies in one step.

    Code mode finishes in 2 steps; the JSON baseline needs one turn per
    call plus a final turn.
    """
    tasks, labels = [], {}
    builder = ScenarioBuilder()
    json_actions: dict[str, list[dict]] = {}
    for i in range(n_tasks):
        task_id = f"batch-{i:02d}"
        cities = [f"city{i}{j}" for j in range(n_calls)]
        loop = (
            f"cities = {cities!r}\n"
            "temps = [call_tool('weather', {'city': c})['temp_c'] for c in cities]\n"
            "print('temps', temps)"
        )
        finish = f"print('FINAL ANSWER: temps-{i}', ' '.join(str(t) for t in temps))"
        builder.add(task_id, [], [make_candidate_text("batch fetch", loop)])
        builder.add(task_id, [loop], [make_candidate_text("finish", finish)])
        tasks.append(_task(task_id, f"temperatures batch {i}?", (f"temps-{i}",)))
        labels[task_id] = "batch"
        json_actions[task_id] = [
            *({"call": {"tool": "weather", "params": {"city": c}}} for c in cities),
            {"final": f"temps-{i} 21 21 21 21"},
        ]
    suite = BenchmarkSuite(tasks=tasks, labels=labels)
    config = RunConfig(
        engine=EngineConfig(latent_mode="constant_zero", hp=HyperParams(n_candidates=1, max_depth=6))
    )
    return suite, builder.build(), json_actions, config


def make_oversized_suite():
    """One task whose answer hides beyond the JSON-mode truncation window."""
    task_id = "oversized-0"
    fetch = "doc = call_tool('bigdoc', {'doc_id': 'z9'})\nprint('doc bytes', len(doc['padding']))"
    finish = "print('FINAL ANSWER: the code is', doc['access_code'])"
    builder = (
        ScenarioBuilder()
        .add(task_id, [], [make_candidate_text("fetch big doc", fetch)])
        .add(task_id, [fetch], [make_candidate_text("finish", finish)])
    )
    task = _task(task_id, "what is the access code in the big document?", ("CODE-z9",))
    suite = BenchmarkSuite(tasks=[task], labels={task_id: "oversized"})
    json_actions = {
        task_id: [
            {"call": {"tool": "bigdoc", "params": {"doc_id": "z9"}}},
            {"final_from_observations": True},
        ]
    }
    config = RunConfig(
        engine=EngineConfig(latent_mode="constant_zero", hp=HyperParams(n_candidates=1, max_depth=6))
    )
    return suite, builder.build(), json_actions, config
