"""Independent brute-force oracles for the acceptance suite.

The rollout oracle walks a plain candidate tree (no gateway, no policy,
no engine imports) and recomputes rollout statistics from first
principles: a path ends at a sentinel line, at the depth budget, or when
a node has no children; the final answer is the sentinel text or the
step-by-step concatenation; Solved means every oracle term appears in the
answer, case-insensitively.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

SENTINEL = "FINAL ANSWER:"


@dataclass
class CandNode:
    thought: str
    code: str
    stdout: str
    children: list["CandNode"] = field(default_factory=list)


def print_node(thought: str, text: str, children=None) -> CandNode:
    return CandNode(thought=thought, code=f"print({text!r})", stdout=text + "\n", children=list(children or []))


def sentinel_node(thought: str, answer: str) -> CandNode:
    text = f"{SENTINEL} {answer}"
    return CandNode(thought=thought, code=f"print({text!r})", stdout=text + "\n")


def candidate_text(node: CandNode) -> str:
    return f"{node.thought}\n```python\n{node.code}\n```"


def _solved(answer: str, oracle_terms: tuple[str, ...]) -> bool:
    low = answer.lower()
    return all(term.lower() in low for term in oracle_terms)


def _reorg(entries: list[CandNode]) -> str:
    return "\n".join(f"Step{i}: {e.thought} => {e.stdout}" for i, e in enumerate(entries, start=1))


def brute_force_rollout(
    root: CandNode,
    oracle_terms: tuple[str, ...],
    alpha: float,
    beta: float,
    big_l: float,
    max_continuation: int,
) -> tuple[int, int, float, float]:
    """(delta_correct, delta_total, tau, latent value) by full enumeration."""
    paths: list[tuple[bool, int]] = []

    def leaf(entries: list[CandNode], steps: int, sentinel_answer: str | None) -> None:
        answer = sentinel_answer if sentinel_answer is not None else _reorg(entries)
        paths.append((_solved(answer, oracle_terms), steps))

    def walk(entries: list[CandNode], node: CandNode, steps: int) -> None:
        if SENTINEL in node.stdout:
            leaf(entries, steps, node.stdout.split(SENTINEL, 1)[1].strip())
            return
        if steps >= max_continuation or not node.children:
            leaf(entries, steps, None)
            return
        for child in node.children:
            walk(entries + [child], child, steps + 1)

    walk([root], root, 0)
    delta_total = len(paths)
    delta_correct = sum(1 for solved, _ in paths if solved)
    tau = sum(steps for _, steps in paths) / len(paths)
    lr = delta_correct / delta_total
    value = alpha ** (1.0 - lr) * beta ** (tau / big_l)
    return delta_correct, delta_total, tau, value


_counter = 0


def _fresh_text(rng: random.Random, tag: str) -> str:
    global _counter
    _counter += 1
    return f"{tag} line {_counter} r{rng.randrange(1000)}"


def random_tree(rng: random.Random, oracle_term: str, depth_left: int, tag: str) -> CandNode:
    """Random continuation node: sentinel leaf (right or wrong) or a plain
    step with 1-2 children while depth remains."""
    roll = rng.random()
    if depth_left == 0 or roll < 0.3:
        if rng.random() < 0.5:
            return sentinel_node(f"answer {tag}", f"the result {oracle_term} holds")
        return sentinel_node(f"guess {tag}", "inconclusive output")
    node = print_node(f"work {tag}", _fresh_text(rng, tag))
    for i in range(rng.choice([1, 2])):
        node.children.append(random_tree(rng, oracle_term, depth_left - 1, f"{tag}.{i}"))
    return node


def tree_to_scenario(builder, task_id: str, prefix_codes: list[str], node: CandNode) -> None:
    """Register node.children under the prefix ending at node, recursively."""
    if not node.children:
        return
    builder.add(task_id, prefix_codes + [node.code], [candidate_text(c) for c in node.children])
    for child in node.children:
        tree_to_scenario(builder, task_id, prefix_codes + [node.code], child)


def forest_to_scenario(builder, task_id: str, roots: list[CandNode]) -> None:
    """Register a whole tree starting from an empty committed prefix."""
    builder.add(task_id, [], [candidate_text(r) for r in roots])
    for root in roots:
        tree_to_scenario(builder, task_id, [], root)
