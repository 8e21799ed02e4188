"""Benchmark orchestration: suites, metrics, reports, ablations, baselines."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import httpx
from pydantic import Field, model_validator

from .collector import (
    ConstantLatentScorer,
    PrmLatentScorer,
    RolloutLatentScorer,
    RolloutMode,
    collect_tree,
    emit_jsonl,
    label_pairs,
)
from .engine import EngineConfig, run_task
from .gateway import ExecutionGateway
from .judge import JudgeBackend, RuleBasedJudge, sopr
from .model import (
    AnswerStatus,
    ExecStatus,
    FrozenModel,
    Task,
    Trajectory,
    canonical_json_bytes,
    serialize_trajectory,
)
from .policy import PolicyBackend
from .rewards import ConflictCase, classify_conflict
from .runner import ToolError

DEFAULT_SUBSET = "default"


class ZeroStepsError(ValueError):
    """SCEP over zero committed steps is undefined."""


class EmptyInputError(ValueError):
    """A metric was requested over an empty collection."""


class BenchmarkSuite(FrozenModel):
    """A list of tasks with optional subset labels (task id -> label)."""

    tasks: list[Task] = Field(min_length=1)
    labels: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_ids(self) -> "BenchmarkSuite":
        ids = [t.id for t in self.tasks]
        if len(ids) != len(set(ids)):
            raise ValueError("task ids must be unique")
        return self

    def subset_of(self, task_id: str) -> str:
        return self.labels.get(task_id, DEFAULT_SUBSET)


class RunConfig(FrozenModel):
    """One JSON-serializable bundle of everything a run needs."""

    engine: EngineConfig = EngineConfig()
    truncation_budget: int = Field(default=2048, ge=0)
    rollout_mode: RolloutMode = "sampled"


class SubsetMetrics(FrozenModel):
    sopr: float = Field(ge=0.0, le=1.0)
    scep: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    avg_depth: float = Field(ge=0.0)
    total_tokens: int = Field(ge=0)
    avg_tokens: float = Field(ge=0.0)
    n_tasks: int = Field(ge=0)


class ConflictDistribution(FrozenModel):
    counts: dict[str, int]
    percentages: dict[str, float]
    total: int

    @model_validator(mode="after")
    def _check_sum(self) -> "ConflictDistribution":
        if self.total > 0 and abs(sum(self.percentages.values()) - 100.0) > 1e-9:
            raise ValueError("conflict percentages must sum to 100")
        return self


class MetricsReport(FrozenModel):
    per_subset: dict[str, SubsetMetrics]
    average: SubsetMetrics
    conflicts: Optional[ConflictDistribution] = None


# -- metric operations ---------------------------------------------------------


def scep(trajectories: Sequence[Trajectory]) -> float:
    """Fraction of committed steps whose code executed successfully."""
    total = sum(len(t.steps) for t in trajectories)
    if total == 0:
        raise ZeroStepsError("no committed steps")
    good = sum(
        1
        for t in trajectories
        for s in t.steps
        if s.selected_candidate.exec.status is ExecStatus.success
    )
    return good / total


def depth_and_tokens(trajectories: Sequence[Trajectory]) -> tuple[float, int]:
    """(average reasoning depth, total token consumption)."""
    if not trajectories:
        raise EmptyInputError("no trajectories")
    avg_depth = sum(t.depth for t in trajectories) / len(trajectories)
    return avg_depth, sum(t.total_tokens for t in trajectories)


def conflict_distribution(trajectories: Sequence[Trajectory]) -> ConflictDistribution:
    """Classify every recorded two-candidate step into the conflict taxonomy."""
    counts = {case.value: 0 for case in ConflictCase}
    for trajectory in trajectories:
        for record in trajectory.steps:
            if len(record.candidates) != 2:
                continue
            case = classify_conflict(record.candidates[0].rewards, record.candidates[1].rewards)
            counts[case.value] += 1
    total = sum(counts.values())
    percentages = {k: (100.0 * v / total if total else 0.0) for k, v in counts.items()}
    return ConflictDistribution(counts=counts, percentages=percentages, total=total)


def _subset_metrics(statuses: list[AnswerStatus], trajectories: list[Trajectory], with_scep: bool) -> SubsetMetrics:
    avg_depth, total_tokens = depth_and_tokens(trajectories) if trajectories else (0.0, 0)
    scep_value: Optional[float] = None
    if with_scep:
        try:
            scep_value = scep(trajectories)
        except ZeroStepsError:
            scep_value = None
    return SubsetMetrics(
        sopr=sopr(statuses) if statuses else 0.0,
        scep=scep_value,
        avg_depth=avg_depth,
        total_tokens=total_tokens,
        avg_tokens=total_tokens / len(trajectories) if trajectories else 0.0,
        n_tasks=len(trajectories),
    )


def build_report(
    trajectories: dict[str, Trajectory],
    labels: Optional[dict[str, str]] = None,
    with_scep: bool = True,
    with_conflicts: bool = True,
) -> MetricsReport:
    labels = labels or {}
    by_subset: dict[str, tuple[list[AnswerStatus], list[Trajectory]]] = {}
    all_statuses: list[AnswerStatus] = []
    all_trajs: list[Trajectory] = []
    for task_id in sorted(trajectories):
        trajectory = trajectories[task_id]
        status = trajectory.answer_status or AnswerStatus.Unsolved
        subset = labels.get(task_id, DEFAULT_SUBSET)
        statuses, trajs = by_subset.setdefault(subset, ([], []))
        statuses.append(status)
        trajs.append(trajectory)
        all_statuses.append(status)
        all_trajs.append(trajectory)
    per_subset = {
        name: _subset_metrics(statuses, trajs, with_scep)
        for name, (statuses, trajs) in sorted(by_subset.items())
    }
    return MetricsReport(
        per_subset=per_subset,
        average=_subset_metrics(all_statuses, all_trajs, with_scep),
        conflicts=conflict_distribution(all_trajs) if with_conflicts else None,
    )


# -- suite runner ---------------------------------------------------------------


@dataclass
class RunEnvironment:
    """Live collaborators for a run; tests mount mock services in-process."""

    policy: PolicyBackend
    tool_client: Optional[httpx.Client] = None
    prm_client: Optional[httpx.Client] = None
    judge: Optional[JudgeBackend] = None
    runner: Optional[Any] = None

    def judge_for(self, task: Task) -> JudgeBackend:
        return self.judge if self.judge is not None else RuleBasedJudge(task.oracle)


@dataclass
class RunResult:
    report: MetricsReport
    trajectories: dict[str, Trajectory]
    failures: dict[str, str]


def _build_scorer(config: RunConfig, env: RunEnvironment, gateway: ExecutionGateway, judge: JudgeBackend):
    mode = config.engine.latent_mode
    if mode == "constant_zero":
        return ConstantLatentScorer(0.0)
    if mode == "prm":
        if env.prm_client is None:
            raise ValueError("latent_mode=prm requires a PRM client")
        return PrmLatentScorer(env.prm_client)
    return RolloutLatentScorer(env.policy, gateway, judge, config.engine.hp, mode=config.rollout_mode)


def _empty_trajectory(task_id: str) -> Trajectory:
    return Trajectory(task_id=task_id, steps=[], final_answer="", depth=0, total_tokens=0)


def run_suite(suite: BenchmarkSuite, config: RunConfig, env: RunEnvironment) -> RunResult:
    """Run the stepwise engine on every task, judge answers, build the report.

    Per-task failures are recorded as Unsolved with an error note; the run
    continues.
    """
    gateway = ExecutionGateway(tool_client=env.tool_client, runner=env.runner, sentinel=config.engine.sentinel)
    trajectories: dict[str, Trajectory] = {}
    failures: dict[str, str] = {}
    try:
        for task in suite.tasks:
            judge = env.judge_for(task)
            try:
                scorer = _build_scorer(config, env, gateway, judge)
                trajectory = run_task(task, config.engine, env.policy, scorer, gateway)
                verdict = judge.judge(task.query, trajectory.final_answer)
                trajectory = trajectory.model_copy(update={"answer_status": verdict.status})
            except Exception as exc:  # per-task isolation; see module docstring
                failures[task.id] = f"{type(exc).__name__}: {exc}"
                trajectory = _empty_trajectory(task.id).model_copy(
                    update={"answer_status": AnswerStatus.Unsolved}
                )
            trajectories[task.id] = trajectory
    finally:
        if env.runner is None:
            gateway.close()
    return RunResult(
        report=build_report(trajectories, suite.labels), trajectories=trajectories, failures=failures
    )


def ablation_variants(config: RunConfig) -> dict[str, RunConfig]:
    spot_off = config.engine.model_copy(update={"spot_enabled": False})
    latent_off = config.engine.model_copy(update={"latent_enabled": False})
    return {
        "full": config,
        "spot_off": config.model_copy(update={"engine": spot_off}),
        "latent_off": config.model_copy(update={"engine": latent_off}),
    }


def run_ablations(suite: BenchmarkSuite, config: RunConfig, env: RunEnvironment) -> dict[str, RunResult]:
    return {name: run_suite(suite, variant, env) for name, variant in ablation_variants(config).items()}


# -- PRM data collection ----------------------------------------------------------


def collect_suite(
    suite: BenchmarkSuite,
    config: RunConfig,
    env: RunEnvironment,
    depth_cap: int,
    out_path: Optional[str | Path] = None,
):
    """DFS process trees for every task; returns (pairs, count written)."""
    gateway = ExecutionGateway(tool_client=env.tool_client, runner=env.runner, sentinel=config.engine.sentinel)
    pairs = []
    try:
        for task in suite.tasks:
            judge = env.judge_for(task)
            tree = collect_tree(
                task,
                env.policy,
                gateway,
                judge,
                config.engine.hp,
                depth_cap,
                sentinel=config.engine.sentinel,
                rollout_mode=config.rollout_mode,
            )
            pairs.extend(label_pairs(tree))
    finally:
        if env.runner is None:
            gateway.close()
    written = emit_jsonl(pairs, out_path) if out_path is not None else 0
    return pairs, written


# -- JSON-mode baseline -------------------------------------------------------------


class JsonModeResult(FrozenModel):
    task_id: str
    depth: int = Field(ge=0)
    total_tokens: int = Field(ge=0)
    final_answer: str
    answer_status: AnswerStatus


def truncate_utf8(text: str, budget_bytes: int) -> str:
    """Cut at the byte budget without splitting a code point."""
    raw = text.encode("utf-8")
    if len(raw) <= budget_bytes:
        return text
    return raw[:budget_bytes].decode("utf-8", errors="ignore")


def run_json_baseline(
    suite: BenchmarkSuite,
    config: RunConfig,
    json_scenario: dict[str, list[dict[str, Any]]],
    env: RunEnvironment,
) -> tuple[MetricsReport, dict[str, JsonModeResult]]:
    """Minimal JSON-mode loop: one tool call per model turn, observations
    truncated to the configured byte budget. Used for depth/token
    comparisons against code mode only."""
    import json as _json

    gateway = ExecutionGateway(tool_client=env.tool_client, runner=env.runner)
    results: dict[str, JsonModeResult] = {}
    try:
        for task in suite.tasks:
            actions = json_scenario.get(task.id, [])
            observations: list[str] = []
            tokens = 0
            depth = 0
            answer = ""
            max_depth = min(task.max_depth, config.engine.hp.max_depth)
            for action in actions:
                if depth >= max_depth:
                    break
                depth += 1
                tokens += len(_json.dumps(action).split())
                if "call" in action:
                    call = action["call"]
                    try:
                        body = gateway.call_tool(task, call["tool"], dict(call.get("params", {})))
                        observation = truncate_utf8(
                            _json.dumps(body, ensure_ascii=False), config.truncation_budget
                        )
                    except ToolError as exc:
                        observation = truncate_utf8(f"ERROR: {exc}", config.truncation_budget)
                    observations.append(observation)
                    tokens += len(observation.split())
                elif "final" in action:
                    answer = str(action["final"])
                    break
                elif action.get("final_from_observations"):
                    answer = "\n".join(observations)
                    break
            verdict = env.judge_for(task).judge(task.query, answer)
            results[task.id] = JsonModeResult(
                task_id=task.id,
                depth=depth,
                total_tokens=tokens,
                final_answer=answer,
                answer_status=verdict.status,
            )
    finally:
        if env.runner is None:
            gateway.close()

    by_subset: dict[str, list[JsonModeResult]] = {}
    for task in suite.tasks:
        by_subset.setdefault(suite.subset_of(task.id), []).append(results[task.id])

    def metrics(items: list[JsonModeResult]) -> SubsetMetrics:
        total_tokens = sum(r.total_tokens for r in items)
        return SubsetMetrics(
            sopr=sopr([r.answer_status for r in items]),
            scep=None,
            avg_depth=sum(r.depth for r in items) / len(items),
            total_tokens=total_tokens,
            avg_tokens=total_tokens / len(items),
            n_tasks=len(items),
        )

    report = MetricsReport(
        per_subset={name: metrics(items) for name, items in sorted(by_subset.items())},
        average=metrics(list(results[t.id] for t in suite.tasks)),
        conflicts=None,
    )
    return report, results


# -- persistence ----------------------------------------------------------------


def write_trajectories(trajectories: dict[str, Trajectory], out_dir: str | Path) -> list[Path]:
    directory = Path(out_dir) / "trajectories"
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for task_id in sorted(trajectories):
        path = directory / f"{task_id}.json"
        path.write_bytes(serialize_trajectory(trajectories[task_id]))
        written.append(path)
    return written


def load_trajectories(directory: str | Path) -> dict[str, Trajectory]:
    from .model import deserialize_trajectory

    out: dict[str, Trajectory] = {}
    for path in sorted(Path(directory).glob("*.json")):
        trajectory = deserialize_trajectory(path.read_bytes())
        out[trajectory.task_id] = trajectory
    return out


def report_to_csv(report: MetricsReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["subset", "n_tasks", "sopr", "scep", "avg_depth", "total_tokens", "avg_tokens"])
    rows = list(report.per_subset.items()) + [("average", report.average)]
    for name, m in rows:
        writer.writerow(
            [name, m.n_tasks, repr(m.sopr), "" if m.scep is None else repr(m.scep), repr(m.avg_depth), m.total_tokens, repr(m.avg_tokens)]
        )
    return buffer.getvalue()


def write_report(report: MetricsReport, failures: dict[str, str], out_dir: str | Path) -> dict[str, Path]:
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / "report.json"
    payload = {"report": report.model_dump(mode="json"), "failures": dict(sorted(failures.items()))}
    json_path.write_bytes(canonical_json_bytes(payload))
    csv_path = directory / "report.csv"
    csv_path.write_text(report_to_csv(report), encoding="utf-8")
    return {"json": json_path, "csv": csv_path}
