"""The stepwise inference loop: fan out candidates, score, commit, repeat.

Each step forks the parent session once per candidate, executes the
candidate on its fork, scores spot and latent rewards, and commits the
argmax candidate by promoting its fork to be the new parent (the winner's
code is never re-executed). The loop ends when the committed step prints
the final-answer sentinel or the depth budget is exhausted.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from importlib import resources
from typing import Literal, Optional, Protocol, Sequence

from .gateway import ExecutionGateway, SessionHandle
from .model import (
    CandidateRecord,
    CodeStep,
    ExecStatus,
    ExecutionResult,
    HyperParams,
    LatentEstimate,
    LatentMethod,
    RewardBundle,
    SENTINEL_DEFAULT,
    StepRecord,
    Task,
    Trajectory,
    FrozenModel,
)
from .policy import (
    HistoryEntry,
    PolicyBackend,
    PromptBundle,
    ScenarioExhausted,
    assemble_prompt,
    sample_candidates,
)
from .rewards import on_the_spot, select_candidate


class EngineConfig(FrozenModel):
    """Inference-time switches, including the ablation toggles."""

    hp: HyperParams = HyperParams()
    latent_mode: Literal["prm", "rollout", "constant_zero"] = "rollout"
    spot_enabled: bool = True
    latent_enabled: bool = True
    sentinel: str = SENTINEL_DEFAULT
    reorg_mode: Literal["mock", "backend"] = "mock"


@dataclass(frozen=True)
class StepContext:
    """Everything a latent scorer may need about one candidate."""

    task: Task
    history: tuple[HistoryEntry, ...]
    step: CodeStep
    exec: ExecutionResult
    session: Optional[SessionHandle]
    sentinel: str = SENTINEL_DEFAULT


class LatentScorerLike(Protocol):
    def score(self, ctx: StepContext) -> LatentEstimate: ...


CONSTANT_ZERO = LatentEstimate(value=0.0, method=LatentMethod.constant)


def stable_seed(seed: int, scope: str) -> int:
    digest = hashlib.sha256(f"{seed}:{scope}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def apply_ablation(config: EngineConfig, bundles: Sequence[RewardBundle]) -> list[RewardBundle]:
    """Zero out disabled reward components, keeping r_total consistent."""
    if config.spot_enabled and config.latent_enabled:
        return list(bundles)
    adjusted = []
    for bundle in bundles:
        spot = bundle.r_spot if config.spot_enabled else 0
        latent = bundle.latent
        if not config.latent_enabled and latent.value != 0.0:
            latent = latent.model_copy(update={"value": 0.0})
        adjusted.append(RewardBundle.build(spot, latent))
    return adjusted


def choose_index(
    config: EngineConfig,
    bundles: Sequence[RewardBundle],
    executable: Sequence[bool],
    rng: random.Random,
) -> int:
    """Argmax selection, except the latent-off ablation draws uniformly
    among executable candidates when several execute successfully."""
    if not config.latent_enabled:
        runnable = [i for i, ok in enumerate(executable) if ok]
        if len(runnable) > 1:
            return rng.choice(runnable)
        if len(runnable) == 1:
            return runnable[0]
    return select_candidate(bundles)


def extract_sentinel_answer(stdout: str, sentinel: str) -> Optional[str]:
    if sentinel not in stdout:
        return None
    return stdout.split(sentinel, 1)[1].strip()


def compose_final_answer(
    trajectory: Trajectory,
    backend: Optional[PolicyBackend] = None,
    sentinel: str = SENTINEL_DEFAULT,
    mode: Literal["mock", "backend"] = "mock",
) -> tuple[str, str]:
    """Final answer text plus its provenance tag.

    Sentinel answers are read straight from the committed stdout. Without
    a sentinel, mock mode concatenates (thought, stdout) pairs
    deterministically while backend mode asks the policy to reorganize
    them.
    """
    for record in trajectory.steps:
        answer = extract_sentinel_answer(record.selected_candidate.exec.stdout, sentinel)
        if answer is not None:
            return answer, "sentinel"
    if not trajectory.steps:
        return "", "none"
    pairs = [
        f"Step{i}: {rec.selected_candidate.step.thought} => {rec.selected_candidate.exec.stdout}"
        for i, rec in enumerate(trajectory.steps, start=1)
    ]
    if mode == "mock" or backend is None:
        return "\n".join(pairs), "mock_concat"
    template = resources.files("codestepper.prompts").joinpath("answer_reorg.txt").read_text(encoding="utf-8")
    rendered = template.format(query=trajectory.task_id, pairs="\n".join(pairs))
    bundle = PromptBundle(
        system_instruction=rendered,
        tool_docs_rendering="",
        history=[],
        query=rendered,
        task_id=trajectory.task_id,
    )
    return backend.generate(bundle, 1, temperature=0.0, seed=0)[0].strip(), "backend"


def _provisional(task_id: str, steps: list[StepRecord]) -> Trajectory:
    return Trajectory(
        task_id=task_id,
        steps=steps,
        final_answer="",
        depth=len(steps),
        total_tokens=sum(s.selected_candidate.step.token_count or 0 for s in steps),
    )


def run_task(
    task: Task,
    config: EngineConfig,
    backend: PolicyBackend,
    scorer: Optional[LatentScorerLike],
    gateway: ExecutionGateway,
) -> Trajectory:
    """Run the full stepwise loop for one task and return its trajectory."""
    hp = config.hp
    max_depth = min(task.max_depth, hp.max_depth)
    rng = random.Random(stable_seed(hp.rng_seed, f"select:{task.id}"))
    parent = gateway.open_session(task)
    steps: list[StepRecord] = []
    history: list[HistoryEntry] = []

    try:
        for step_index in range(1, max_depth + 1):
            prompt = assemble_prompt(task, history, sentinel=config.sentinel)
            try:
                candidates = sample_candidates(
                    backend,
                    prompt,
                    hp.n_candidates,
                    seed=stable_seed(hp.rng_seed, f"{task.id}:step{step_index}"),
                    step_index=step_index,
                )
            except ScenarioExhausted:
                break

            execs: list[ExecutionResult] = []
            sessions: list[Optional[SessionHandle]] = []
            bundles: list[RewardBundle] = []
            for candidate in candidates:
                if not candidate.parse_ok:
                    exec_result = ExecutionResult(
                        status=ExecStatus.protocol_error, stderr="no executable code block"
                    )
                    session = None
                else:
                    session = gateway.fork_session(parent)
                    exec_result = gateway.exec_step(session, candidate.step.code, hp.exec_timeout_ms)
                    gateway.commit_step(session, candidate.step.code, exec_result.status, hp.exec_timeout_ms)
                execs.append(exec_result)
                sessions.append(session)

                if config.latent_enabled and scorer is not None and session is not None:
                    latent = scorer.score(
                        StepContext(
                            task=task,
                            history=tuple(history),
                            step=candidate.step,
                            exec=exec_result,
                            session=session,
                            sentinel=config.sentinel,
                        )
                    )
                else:
                    latent = CONSTANT_ZERO
                bundles.append(RewardBundle.build(on_the_spot(exec_result), latent))

            adjusted = apply_ablation(config, bundles)
            executable = [e.status is ExecStatus.success for e in execs]
            selected = choose_index(config, adjusted, executable, rng)

            records = [
                CandidateRecord(step=c.step, exec=e, rewards=r, selected=(i == selected))
                for i, (c, e, r) in enumerate(zip(candidates, execs, adjusted))
            ]
            steps.append(StepRecord(candidates=records, selected_index=selected))

            # Promote the winner's fork; losers and the stale parent go away.
            winner_session = sessions[selected]
            for i, session in enumerate(sessions):
                if session is not None and i != selected:
                    gateway.close_session(session)
            if winner_session is not None:
                gateway.close_session(parent)
                parent = winner_session

            chosen = steps[-1].selected_candidate
            history.append(
                HistoryEntry(thought=chosen.step.thought, code=chosen.step.code, stdout=chosen.exec.stdout)
            )
            if extract_sentinel_answer(chosen.exec.stdout, config.sentinel) is not None:
                break
    finally:
        gateway.close_session(parent)

    provisional = _provisional(task.id, steps)
    answer, provenance = compose_final_answer(
        provisional, backend if config.reorg_mode == "backend" else None,
        sentinel=config.sentinel, mode=config.reorg_mode,
    )
    return provisional.model_copy(update={"final_answer": answer, "answer_provenance": provenance})
