from __future__ import annotations

import pytest

from codestepper.harness import (
    BenchmarkSuite,
    EmptyInputError,
    RunEnvironment,
    ZeroStepsError,
    build_report,
    collect_suite,
    conflict_distribution,
    depth_and_tokens,
    load_trajectories,
    run_json_baseline,
    run_suite,
    ablation_variants,
    scep,
    truncate_utf8,
    write_report,
    write_trajectories,
)
from codestepper.model import (
    AnswerStatus,
    CandidateRecord,
    CodeStep,
    ExecStatus,
    ExecutionResult,
    LatentEstimate,
    LatentMethod,
    RewardBundle,
    StepRecord,
    Trajectory,
)
from codestepper.mock_tools import make_prm_app, make_tool_app
from codestepper.policy import ScriptedPolicy
from codestepper.service import in_process_client

from conftest import standard_scenario
from suitegen import make_ablation_suite, make_batch_suite, make_oversized_suite, make_selection_suite


def step_record(success: bool, spot=None, latents=(0.0, 0.0), n_candidates=2, step_index=1) -> StepRecord:
    statuses = [ExecStatus.success if success else ExecStatus.runtime_error, ExecStatus.runtime_error]
    spots = [1 if success else 0, 0] if spot is None else spot
    candidates = []
    for i in range(n_candidates):
        candidates.append(
            CandidateRecord(
                step=CodeStep(step_index=step_index, code="c", raw_model_output="one two"),
                exec=ExecutionResult(status=statuses[i % len(statuses)]),
                rewards=RewardBundle.build(
                    spots[i % len(spots)], LatentEstimate(value=latents[i % len(latents)], method=LatentMethod.constant)
                ),
                selected=False,
            )
        )
    best = max(range(n_candidates), key=lambda i: candidates[i].rewards.r_total)
    winner = next(i for i in range(n_candidates) if candidates[i].rewards.r_total == candidates[best].rewards.r_total)
    candidates[winner] = candidates[winner].model_copy(update={"selected": True})
    return StepRecord(candidates=candidates, selected_index=winner)


def trajectory_with(successes: list[bool], task_id="t", status=AnswerStatus.Solved) -> Trajectory:
    steps = [step_record(ok, step_index=i) for i, ok in enumerate(successes, start=1)]
    return Trajectory(
        task_id=task_id,
        steps=steps,
        final_answer="a",
        answer_status=status,
        depth=len(steps),
        total_tokens=sum(s.selected_candidate.step.token_count for s in steps),
    )


class TestMetricOps:
    def test_scep_hand_count(self):
        trajs = [trajectory_with([True, True, False]), trajectory_with([True, True])]
        assert scep(trajs) == 0.8

    def test_scep_all_success(self):
        assert scep([trajectory_with([True, True])]) == 1.0

    def test_scep_all_failed(self):
        assert scep([trajectory_with([False])]) == 0.0

    def test_scep_zero_steps_errors(self):
        with pytest.raises(ZeroStepsError):
            scep([trajectory_with([])])

    def test_depth_and_tokens(self):
        a = trajectory_with([True, True])
        b = trajectory_with([True, True, False, True])
        avg_depth, total = depth_and_tokens([a, b])
        assert avg_depth == 3.0
        assert total == a.total_tokens + b.total_tokens

    def test_depth_and_tokens_single(self):
        t = trajectory_with([True])
        assert depth_and_tokens([t]) == (1.0, t.total_tokens)

    def test_depth_and_tokens_empty_errors(self):
        with pytest.raises(EmptyInputError):
            depth_and_tokens([])


class TestConflictDistribution:
    def make_fixture(self, n1, n2, n3, n4):
        trajs = []
        specs = (
            [([1, 1], [0.5, 0.6])] * n1
            + [([0, 0], [0.5, 0.6])] * n2
            + [([1, 0], [0.8, 0.3])] * n3
            + [([1, 0], [0.3, 0.8])] * n4
        )
        for i, (spots, latents) in enumerate(specs):
            record = step_record(True, spot=spots, latents=latents)
            trajs.append(
                Trajectory(
                    task_id=f"c{i}",
                    steps=[record],
                    final_answer="",
                    depth=1,
                    total_tokens=record.selected_candidate.step.token_count,
                )
            )
        return trajs

    def test_known_composition(self):
        trajs = self.make_fixture(5, 3, 2, 1)
        dist = conflict_distribution(trajs)
        assert dist.counts == {"Case1": 5, "Case2": 3, "Case3": 2, "Case4": 1}
        assert dist.total == 11
        assert sum(dist.percentages.values()) == pytest.approx(100.0, abs=1e-9)

    def test_all_executable_is_all_case1(self):
        dist = conflict_distribution(self.make_fixture(4, 0, 0, 0))
        assert dist.counts["Case1"] == dist.total == 4


class TestRunSuite:
    def test_selection_suite_perfect(self, tool_client):
        suite, scenario, config = make_selection_suite(4)
        env = RunEnvironment(policy=ScriptedPolicy(scenario), tool_client=tool_client)
        result = run_suite(suite, config, env)
        assert result.failures == {}
        assert result.report.average.sopr == 1.0
        assert result.report.average.scep == 1.0
        assert set(result.report.per_subset) == {"subset-0", "subset-1"}
        assert result.report.average.avg_depth == 2.0

    def test_per_task_failures_recorded_and_run_continues(self, tool_client):
        suite, scenario, config = make_selection_suite(3)
        config = config.model_copy(
            update={"engine": config.engine.model_copy(update={"latent_mode": "prm"})}
        )
        env = RunEnvironment(policy=ScriptedPolicy(scenario), tool_client=tool_client, prm_client=None)
        result = run_suite(suite, config, env)
        assert len(result.failures) == 3
        assert result.report.average.sopr == 0.0
        for trajectory in result.trajectories.values():
            assert trajectory.answer_status is AnswerStatus.Unsolved

    def test_ablation_variants_toggle_flags(self):
        _, _, config = make_selection_suite(1)
        variants = ablation_variants(config)
        assert variants["full"].engine.spot_enabled and variants["full"].engine.latent_enabled
        assert not variants["spot_off"].engine.spot_enabled
        assert not variants["latent_off"].engine.latent_enabled

    def test_spot_ablation_direction(self, tool_client):
        suite, scenario, config = make_ablation_suite(n_clean=6, n_trap=4)
        with in_process_client(make_prm_app()) as prm_client:
            env = RunEnvironment(policy=ScriptedPolicy(scenario), tool_client=tool_client, prm_client=prm_client)
            full = run_suite(suite, config, env)
            spot_off_config = config.model_copy(
                update={"engine": config.engine.model_copy(update={"spot_enabled": False})}
            )
            spot_off = run_suite(suite, spot_off_config, env)
        assert full.report.average.sopr == 1.0
        assert full.report.average.scep == 1.0
        assert spot_off.report.average.scep <= 0.75
        assert spot_off.report.average.sopr < full.report.average.sopr


class TestCollectSuite:
    def test_pairs_written(self, tool_client, tmp_path):
        suite, scenario, config = make_selection_suite(2)
        config = config.model_copy(update={"rollout_mode": "exhaustive"})
        env = RunEnvironment(policy=ScriptedPolicy(scenario), tool_client=tool_client)
        out = tmp_path / "pairs.jsonl"
        pairs, written = collect_suite(suite, config, env, depth_cap=2, out_path=out)
        assert written == len(pairs) > 0
        for pair in pairs:
            assert pair.chosen_latent > pair.rejected_latent


class TestJsonBaseline:
    def test_batchable_depth_gap(self, tool_client):
        suite, code_scenario, json_actions, config = make_batch_suite(3)
        env = RunEnvironment(policy=ScriptedPolicy(code_scenario), tool_client=tool_client)
        code_result = run_suite(suite, config, env)
        report, results = run_json_baseline(suite, config, json_actions, env)
        assert code_result.report.average.avg_depth == 2.0
        assert report.average.avg_depth == 5.0
        assert report.average.sopr == 1.0

    def test_oversized_truncation_loses_answer(self, tool_client):
        suite, code_scenario, json_actions, config = make_oversized_suite()
        env = RunEnvironment(policy=ScriptedPolicy(code_scenario), tool_client=tool_client)
        code_result = run_suite(suite, config, env)
        report, results = run_json_baseline(suite, config, json_actions, env)
        assert code_result.trajectories["oversized-0"].answer_status is AnswerStatus.Solved
        assert results["oversized-0"].answer_status is AnswerStatus.Unsolved

    def test_truncate_utf8_safe(self):
        text = "héllo" * 1000
        cut = truncate_utf8(text, 10)
        assert len(cut.encode("utf-8")) <= 10
        assert truncate_utf8("short", 100) == "short"


class TestPersistence:
    def test_trajectory_files_round_trip(self, tool_client, tmp_path):
        suite, scenario, config = make_selection_suite(2)
        env = RunEnvironment(policy=ScriptedPolicy(scenario), tool_client=tool_client)
        result = run_suite(suite, config, env)
        files = write_trajectories(result.trajectories, tmp_path)
        assert len(files) == 2
        loaded = load_trajectories(tmp_path / "trajectories")
        assert loaded == result.trajectories

    def test_reports_deterministic_bytes(self, tmp_path):
        trajs = {"a": trajectory_with([True], task_id="a"), "b": trajectory_with([True, False], task_id="b")}
        report = build_report(trajs, {"a": "s1", "b": "s2"})
        first = write_report(report, {}, tmp_path / "r1")
        second = write_report(report, {}, tmp_path / "r2")
        assert first["json"].read_bytes() == second["json"].read_bytes()
        assert first["csv"].read_bytes() == second["csv"].read_bytes()

    def test_csv_has_subset_rows(self, tmp_path):
        trajs = {"a": trajectory_with([True], task_id="a")}
        report = build_report(trajs, {"a": "s1"})
        paths = write_report(report, {}, tmp_path)
        lines = paths["csv"].read_text().splitlines()
        assert lines[0].startswith("subset,")
        assert lines[1].startswith("s1,")
        assert lines[-1].startswith("average,")


def test_suite_requires_unique_ids():
    from conftest import make_task

    with pytest.raises(ValueError):
        BenchmarkSuite(tasks=[make_task(task_id="x"), make_task(task_id="x")])
