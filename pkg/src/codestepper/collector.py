"""Latent reward estimation by rollouts and the process-data pipeline.

A rollout continues a candidate's session to termination (sentinel or
depth budget), assembles a final answer, and asks the judge whether the
path solved the task. ``exhaustive`` mode enumerates every continuation
path of a scripted scenario depth-first instead of sampling, which makes
the estimate exactly equal to brute-force enumeration on small trees.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Protocol, Sequence

import httpx
from pydantic import Field, model_validator

from .engine import StepContext, extract_sentinel_answer, stable_seed
from .gateway import ExecutionGateway, SessionHandle
from .judge import JudgeBackend
from .model import (
    CodeStep,
    ExecStatus,
    ExecutionResult,
    FrozenModel,
    HyperParams,
    LatentEstimate,
    LatentMethod,
    RolloutStats,
    SENTINEL_DEFAULT,
    Task,
    canonical_json_bytes,
)
from .policy import (
    HistoryEntry,
    PolicyBackend,
    ScenarioExhausted,
    assemble_prompt,
    parse_or_placeholder,
    sample_candidates,
)
from .rewards import ZeroTotalError, latent_from_rollouts, latent_from_prm_scores, raw_latent

RolloutMode = Literal["sampled", "exhaustive"]


class PrmServiceError(RuntimeError):
    """The PRM scoring service could not be reached or answered garbage."""


class LatentScorer(Protocol):
    """Scores one candidate step's potential; value always lands in [0, 1]."""

    def score(self, ctx: StepContext) -> LatentEstimate: ...


@dataclass(frozen=True)
class RolloutPath:
    solved: bool
    steps: int


def _mock_reorg_answer(entries: Sequence[HistoryEntry]) -> str:
    return "\n".join(f"Step{i}: {e.thought} => {e.stdout}" for i, e in enumerate(entries, start=1))


def _candidate_texts(backend: PolicyBackend, task: Task, entries: list[HistoryEntry], sentinel: str) -> list[str]:
    """All distinct scripted continuations at a node; [] when exhausted."""
    if hasattr(backend, "candidate_count"):
        count = backend.candidate_count(task.id, [e.code for e in entries])
        if count == 0:
            return []
        prompt = assemble_prompt(task, entries, sentinel=sentinel)
        return backend.generate(prompt, count)
    raise TypeError("exhaustive rollouts require a scripted backend with candidate_count()")


def _run_continuation(
    task: Task,
    session: SessionHandle,
    entries: list[HistoryEntry],
    backend: PolicyBackend,
    gateway: ExecutionGateway,
    judge: JudgeBackend,
    hp: HyperParams,
    sentinel: str,
    pick,
) -> RolloutPath:
    """One rollout from the candidate state; ``pick`` chooses among texts."""
    fork = gateway.fork_session(session)
    local = list(entries)
    steps_taken = 0
    answer: Optional[str] = None
    max_depth = min(task.max_depth, hp.max_depth)
    try:
        while len(local) < max_depth:
            if pick is not None:
                options = _candidate_texts(backend, task, local, sentinel)
                if not options:
                    break
                text = pick(options)
            else:
                prompt = assemble_prompt(task, local, sentinel=sentinel)
                try:
                    text = backend.generate(prompt, 1)[0]
                except ScenarioExhausted:
                    break
            candidate = parse_or_placeholder(text, step_index=len(local) + 1)
            steps_taken += 1
            if not candidate.parse_ok:
                local.append(HistoryEntry(thought=candidate.step.thought, code=candidate.step.code, stdout=""))
                continue
            result = gateway.exec_step(fork, candidate.step.code, hp.exec_timeout_ms)
            gateway.commit_step(fork, candidate.step.code, result.status, hp.exec_timeout_ms)
            local.append(
                HistoryEntry(thought=candidate.step.thought, code=candidate.step.code, stdout=result.stdout)
            )
            answer = extract_sentinel_answer(result.stdout, sentinel)
            if answer is not None:
                break
    finally:
        gateway.close_session(fork)
    if answer is None:
        answer = _mock_reorg_answer(local)
    verdict = judge.judge(task.query, answer)
    return RolloutPath(solved=verdict.status.value == "Solved", steps=steps_taken)


def _enumerate_paths(
    task: Task,
    session: SessionHandle,
    entries: list[HistoryEntry],
    backend: PolicyBackend,
    gateway: ExecutionGateway,
    judge: JudgeBackend,
    hp: HyperParams,
    sentinel: str,
    steps_so_far: int,
) -> list[RolloutPath]:
    """Depth-first enumeration of every scripted continuation path."""
    max_depth = min(task.max_depth, hp.max_depth)

    def leaf(local_entries: list[HistoryEntry], steps: int, answer: Optional[str]) -> RolloutPath:
        text = answer if answer is not None else _mock_reorg_answer(local_entries)
        verdict = judge.judge(task.query, text)
        return RolloutPath(solved=verdict.status.value == "Solved", steps=steps)

    if len(entries) >= max_depth:
        return [leaf(entries, steps_so_far, None)]
    options = _candidate_texts(backend, task, entries, sentinel)
    if not options:
        return [leaf(entries, steps_so_far, None)]

    paths: list[RolloutPath] = []
    for raw in options:
        candidate = parse_or_placeholder(raw, step_index=len(entries) + 1)
        if not candidate.parse_ok:
            branch_entries = entries + [
                HistoryEntry(thought=candidate.step.thought, code=candidate.step.code, stdout="")
            ]
            paths.extend(
                _enumerate_paths(
                    task, session, branch_entries, backend, gateway, judge, hp, sentinel, steps_so_far + 1
                )
            )
            continue
        fork = gateway.fork_session(session)
        try:
            result = gateway.exec_step(fork, candidate.step.code, hp.exec_timeout_ms)
            gateway.commit_step(fork, candidate.step.code, result.status, hp.exec_timeout_ms)
            branch_entries = entries + [
                HistoryEntry(thought=candidate.step.thought, code=candidate.step.code, stdout=result.stdout)
            ]
            answer = extract_sentinel_answer(result.stdout, sentinel)
            if answer is not None:
                paths.append(leaf(branch_entries, steps_so_far + 1, answer))
            else:
                paths.extend(
                    _enumerate_paths(
                        task, fork, branch_entries, backend, gateway, judge, hp, sentinel, steps_so_far + 1
                    )
                )
        finally:
            gateway.close_session(fork)
    return paths


def estimate_latent_by_rollout(
    ctx: StepContext,
    backend: PolicyBackend,
    gateway: ExecutionGateway,
    judge: JudgeBackend,
    hp: HyperParams,
    mode: RolloutMode = "sampled",
    rng: Optional[random.Random] = None,
) -> LatentEstimate:
    """Estimate a candidate's latent reward from continuation rollouts.

    Failed-execution candidates are estimated the same way: rollouts
    continue from their state as committed. The evaluated step is not its
    own continuation; tau counts steps strictly after it, so a candidate
    that itself prints the sentinel scores tau = 0.
    """
    if ctx.session is None:
        raise ValueError("rollout estimation requires the candidate's session")
    if hp.n_rollouts < 1:
        raise ZeroTotalError("n_rollouts must be >= 1")

    entries = list(ctx.history) + [
        HistoryEntry(thought=ctx.step.thought, code=ctx.step.code, stdout=ctx.exec.stdout)
    ]

    terminal = extract_sentinel_answer(ctx.exec.stdout, ctx.sentinel)
    if terminal is not None:
        solved = judge.judge(ctx.task.query, terminal).status.value == "Solved"
        copies = 1 if mode == "exhaustive" else hp.n_rollouts
        paths = [RolloutPath(solved=solved, steps=0)] * copies
    elif mode == "exhaustive":
        paths = _enumerate_paths(ctx.task, ctx.session, entries, backend, gateway, judge, hp, ctx.sentinel, 0)
    else:
        rng = rng or random.Random(stable_seed(hp.rng_seed, f"rollout:{ctx.task.id}:{ctx.step.code}"))
        scripted = hasattr(backend, "candidate_count")
        pick = (lambda options: options[rng.randrange(len(options))]) if scripted else None
        paths = [
            _run_continuation(ctx.task, ctx.session, entries, backend, gateway, judge, hp, ctx.sentinel, pick)
            for _ in range(hp.n_rollouts)
        ]

    delta_total = len(paths)
    delta_correct = sum(1 for p in paths if p.solved)
    tau = sum(p.steps for p in paths) / len(paths)
    lr = raw_latent(delta_correct, delta_total)
    value = latent_from_rollouts(lr, tau, hp)
    return LatentEstimate(
        value=value,
        method=LatentMethod.rollout,
        rollout_stats=RolloutStats(delta_correct=delta_correct, delta_total=delta_total, tau=tau, raw_lr=lr),
    )


# -- process tree -----------------------------------------------------------


@dataclass
class ProcessTreeNode:
    node_id: str
    depth: int
    entry: Optional[HistoryEntry]
    step: Optional[CodeStep]
    exec: Optional[ExecutionResult]
    latent: Optional[LatentEstimate]
    parent: Optional["ProcessTreeNode"] = None
    children: list["ProcessTreeNode"] = field(default_factory=list)
    label: Optional[str] = None

    def prefix_entries(self) -> list[HistoryEntry]:
        """History entries on the path to this node's parent."""
        entries: list[HistoryEntry] = []
        node = self.parent
        while node is not None and node.entry is not None:
            entries.append(node.entry)
            node = node.parent
        entries.reverse()
        return entries


@dataclass
class ProcessTree:
    task_id: str
    query: str
    root: ProcessTreeNode

    def walk(self) -> list[ProcessTreeNode]:
        out: list[ProcessTreeNode] = []

        def visit(node: ProcessTreeNode) -> None:
            out.append(node)
            for child in node.children:
                visit(child)

        visit(self.root)
        return out

    def candidate_nodes(self) -> list[ProcessTreeNode]:
        return [n for n in self.walk() if n.step is not None]


class PrmPair(FrozenModel):
    """One labeled sibling pair for preference training."""

    query: str
    prefix: list[HistoryEntry] = Field(default_factory=list)
    chosen: str
    rejected: str
    chosen_latent: float
    rejected_latent: float

    @model_validator(mode="after")
    def _check_order(self) -> "PrmPair":
        if not self.chosen_latent > self.rejected_latent:
            raise ValueError("chosen_latent must be strictly greater than rejected_latent")
        return self


def collect_tree(
    task: Task,
    backend: PolicyBackend,
    gateway: ExecutionGateway,
    judge: JudgeBackend,
    hp: HyperParams,
    depth_cap: int,
    sentinel: str = SENTINEL_DEFAULT,
    rollout_mode: RolloutMode = "exhaustive",
) -> ProcessTree:
    """Depth-first binary action tree with a latent estimate per node."""
    root = ProcessTreeNode(node_id="root", depth=0, entry=None, step=None, exec=None, latent=None)
    root_session = gateway.open_session(task)
    counter = {"n": 0}

    def expand(parent_node: ProcessTreeNode, session: SessionHandle, entries: list[HistoryEntry], depth: int) -> None:
        if depth > depth_cap:
            return
        prompt = assemble_prompt(task, entries, sentinel=sentinel)
        try:
            candidates = sample_candidates(backend, prompt, 2, step_index=depth)
        except ScenarioExhausted:
            return
        for candidate in candidates:
            counter["n"] += 1
            node_id = f"n{counter['n']}"
            if not candidate.parse_ok:
                exec_result = ExecutionResult(status=ExecStatus.protocol_error, stderr="no executable code block")
                latent = LatentEstimate(value=0.0, method=LatentMethod.constant)
                node = ProcessTreeNode(
                    node_id=node_id,
                    depth=depth,
                    entry=HistoryEntry(thought=candidate.step.thought, code=candidate.step.code, stdout=""),
                    step=candidate.step,
                    exec=exec_result,
                    latent=latent,
                    parent=parent_node,
                )
                parent_node.children.append(node)
                continue
            fork = gateway.fork_session(session)
            try:
                exec_result = gateway.exec_step(fork, candidate.step.code, hp.exec_timeout_ms)
                gateway.commit_step(fork, candidate.step.code, exec_result.status, hp.exec_timeout_ms)
                ctx = StepContext(
                    task=task,
                    history=tuple(entries),
                    step=candidate.step,
                    exec=exec_result,
                    session=fork,
                    sentinel=sentinel,
                )
                latent = estimate_latent_by_rollout(ctx, backend, gateway, judge, hp, mode=rollout_mode)
                entry = HistoryEntry(
                    thought=candidate.step.thought, code=candidate.step.code, stdout=exec_result.stdout
                )
                node = ProcessTreeNode(
                    node_id=node_id,
                    depth=depth,
                    entry=entry,
                    step=candidate.step,
                    exec=exec_result,
                    latent=latent,
                    parent=parent_node,
                )
                parent_node.children.append(node)
                if extract_sentinel_answer(exec_result.stdout, sentinel) is None:
                    expand(node, fork, entries + [entry], depth + 1)
            finally:
                gateway.close_session(fork)

    try:
        expand(root, root_session, [], 1)
    finally:
        gateway.close_session(root_session)

    tree = ProcessTree(task_id=task.id, query=task.query, root=root)
    _assign_labels(tree)
    return tree


def _assign_labels(tree: ProcessTree) -> None:
    for parent in tree.walk():
        if len(parent.children) != 2:
            continue
        a, b = parent.children
        if a.latent is None or b.latent is None or a.latent.value == b.latent.value:
            continue
        higher, lower = (a, b) if a.latent.value > b.latent.value else (b, a)
        higher.label = "more_potential"
        lower.label = "less_potential"


def label_pairs(tree: ProcessTree) -> list[PrmPair]:
    """One preference pair per sibling pair with unequal latent values."""
    pairs: list[PrmPair] = []
    for parent in tree.walk():
        if len(parent.children) != 2:
            continue
        a, b = parent.children
        if a.latent is None or b.latent is None or a.latent.value == b.latent.value:
            continue
        higher, lower = (a, b) if a.latent.value > b.latent.value else (b, a)
        pairs.append(
            PrmPair(
                query=tree.query,
                prefix=a.prefix_entries(),
                chosen=higher.step.raw_model_output if higher.step else "",
                rejected=lower.step.raw_model_output if lower.step else "",
                chosen_latent=higher.latent.value,
                rejected_latent=lower.latent.value,
            )
        )
    return pairs


def emit_jsonl(pairs: Sequence[PrmPair], path: str | Path) -> int:
    """Write pairs as key-sorted JSON lines; returns the count written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        for pair in pairs:
            handle.write(canonical_json_bytes(pair.model_dump(mode="json")))
    return len(pairs)


def read_pairs_jsonl(path: str | Path) -> list[PrmPair]:
    pairs = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                pairs.append(PrmPair.model_validate(json.loads(line)))
    return pairs


# -- scorers ------------------------------------------------------------------


def prm_remote_score(
    client: httpx.Client, query: str, prefix: Sequence[HistoryEntry], candidate: str
) -> LatentEstimate:
    """POST /score against the PRM service and normalize the label scores."""
    payload = {
        "query": query,
        "prefix": [e.model_dump(mode="json") for e in prefix],
        "candidate": candidate,
    }
    try:
        response = client.post("/score", json=payload)
    except httpx.HTTPError as exc:
        raise PrmServiceError(f"PRM service unreachable: {exc}") from exc
    if response.status_code != 200:
        raise PrmServiceError(f"PRM service returned HTTP {response.status_code}")
    data = response.json()
    value = latent_from_prm_scores(float(data["s_yes"]), float(data["s_no"]))
    return LatentEstimate(value=value, method=LatentMethod.prm)


class RolloutLatentScorer:
    """LatentScorer backed by continuation rollouts on forked sessions."""

    def __init__(
        self,
        backend: PolicyBackend,
        gateway: ExecutionGateway,
        judge: JudgeBackend,
        hp: HyperParams,
        mode: RolloutMode = "sampled",
    ) -> None:
        self._backend = backend
        self._gateway = gateway
        self._judge = judge
        self._hp = hp
        self._mode = mode

    def score(self, ctx: StepContext) -> LatentEstimate:
        return estimate_latent_by_rollout(
            ctx, self._backend, self._gateway, self._judge, self._hp, mode=self._mode
        )


class PrmLatentScorer:
    """LatentScorer calling a PRM service over its HTTP contract."""

    def __init__(self, client: httpx.Client) -> None:
        self._client = client

    def score(self, ctx: StepContext) -> LatentEstimate:
        return prm_remote_score(self._client, ctx.task.query, list(ctx.history), ctx.step.raw_model_output)


class ConstantLatentScorer:
    def __init__(self, value: float = 0.0) -> None:
        self._estimate = LatentEstimate(value=value, method=LatentMethod.constant)

    def score(self, ctx: StepContext) -> LatentEstimate:
        return self._estimate
