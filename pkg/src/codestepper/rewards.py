"""Pure reward arithmetic: spot reward, latent reward, selection, conflicts.

Every function here is a pure function of its arguments and safe to call
from any number of concurrent workers.
"""

from __future__ import annotations

import enum
from typing import Sequence

from .model import ExecStatus, ExecutionResult, HyperParams, RewardBundle


class RewardDomainError(ValueError):
    """An argument is outside the domain a reward formula is defined on."""


class ZeroTotalError(RewardDomainError):
    """Raised when a ratio over zero rollout paths is requested."""


class DegenerateScoresError(RewardDomainError):
    """Raised when both PRM scores are zero and normalization is undefined."""


class EmptyCandidatesError(ValueError):
    """Raised when selection is attempted over an empty candidate list."""


class ConflictCase(str, enum.Enum):
    """Spot/latent agreement taxonomy for a two-candidate step."""

    Case1 = "Case1"  # both executable
    Case2 = "Case2"  # neither executable
    Case3 = "Case3"  # one executable, and it has the strictly higher latent
    Case4 = "Case4"  # one executable, but the other has latent >= it (conflict)


def on_the_spot(exec_result: ExecutionResult) -> int:
    """1 iff the step's code executed successfully, else 0."""
    return 1 if exec_result.status is ExecStatus.success else 0


def raw_latent(delta_correct: int, delta_total: int) -> float:
    """Fraction of rollout paths judged Solved."""
    if delta_total == 0:
        raise ZeroTotalError("delta_total must be >= 1")
    if delta_total < 0 or delta_correct < 0 or delta_correct > delta_total:
        raise RewardDomainError(f"invalid rollout counts ({delta_correct}, {delta_total})")
    return delta_correct / delta_total

def latent_from_rollouts(lr: float, tau: float, hp: HyperParams) -> float:
    """Length-penalized latent reward: alpha^(1-lr) * beta^(tau/L), in (0, 1]."""
    if not 0.0 <= lr <= 1.0:
        raise RewardDomainError(f"lr out of [0,1]: {lr}")
    if tau < 0.0:
        raise RewardDomainError(f"tau must be nonnegative: {tau}")
    return hp.alpha ** (1.0 - lr) * hp.beta ** (tau / hp.big_l)


def latent_from_prm_scores(s_yes: float, s_no: float) -> float:
    """Normalize the two nonnegative PRM label scores to s_yes/(s_yes+s_no)."""
    if s_yes < 0.0 or s_no < 0.0:
        raise RewardDomainError(f"PRM scores must be nonnegative: ({s_yes}, {s_no})")
    if s_yes + s_no == 0.0:
        raise DegenerateScoresError("both PRM scores are zero")
    return s_yes / (s_yes + s_no)


def cumulative(r_spot: int, r_latent: float) -> float:
    """Cumulative step reward: spot + latent."""
    if r_spot not in (0, 1):
        raise RewardDomainError(f"r_spot must be 0 or 1: {r_spot}")
    if not 0.0 <= r_latent <= 1.0:
        raise RewardDomainError(f"r_latent out of [0,1]: {r_latent}")
    return r_spot + r_latent


def select_candidate(candidates: Sequence[RewardBundle]) -> int:
    """Index of the maximal cumulative reward; ties break to the lowest index."""
    if not candidates:
        raise EmptyCandidatesError("no candidates to select from")
    best_index = 0
    best_total = candidates[0].r_total
    for i, bundle in enumerate(candidates[1:], start=1):
        if bundle.r_total > best_total:
            best_index, best_total = i, bundle.r_total
    return best_index


def classify_conflict(a: RewardBundle, b: RewardBundle) -> ConflictCase:
    """Classify a two-candidate step into the conflict taxonomy.

    Case3 requires the executable candidate to have a strictly higher
    latent value; equality falls to Case4.
    """
    if a.r_spot == 1 and b.r_spot == 1:
        return ConflictCase.Case1
    if a.r_spot == 0 and b.r_spot == 0:
        return ConflictCase.Case2
    executable, other = (a, b) if a.r_spot == 1 else (b, a)
    if executable.latent.value > other.latent.value:
        return ConflictCase.Case3
    return ConflictCase.Case4
