"""Group-relative policy optimization for the toy Teacher policy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .backends import TeacherPolicy, policy_grad_logprob
from .core import GrpoConfig, WSTError


class GroupTooSmall(WSTError, ValueError):
    pass


class EmptyBatch(WSTError, ValueError):
    pass


class NonFiniteGradient(WSTError, FloatingPointError):
    pass


@dataclass(frozen=True)
class GroupBatch:
    query_id: str
    category: int
    actions: tuple[int, ...]
    logprobs_old: tuple[float, ...]
    rewards: tuple[float, ...]

    def __post_init__(self) -> None:
        n = len(self.actions)
        if len(self.logprobs_old) != n or len(self.rewards) != n:
            raise ValueError("actions, logprobs_old and rewards must have equal length")
        if any(lp > 0 for lp in self.logprobs_old):
            raise ValueError("logprobs_old must be <= 0")


@dataclass(frozen=True)
class StepStats:
    objective: float
    mean_kl: float
    mean_advantage: float
    grad_norm: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def group_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """Standardize rewards within a group (population std); constant groups give zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall(f"group needs at least 2 rewards, got {r.size}")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    # Center through pairwise differences: r_j - r_i rounds identically after
    # an exact shift of the whole group, so the result is shift-invariant bit for bit.
    centered = (r[:, None] - r[None, :]).sum(axis=1) / r.size
    std = float(np.sqrt(np.mean(centered * centered)))
    return centered / max(std, std_floor)


def clipped_surrogate(logprob_new: float, logprob_old: float, advantage: float, epsilon: float) -> float:
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    ratio = math.exp(logprob_new - logprob_old)
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def kl_estimate(logprob_new: float, logprob_ref: float) -> float:
    d = logprob_ref - logprob_new
    # expm1 keeps the small-|d| case accurate and exactly zero at d == 0
    return max(math.expm1(d) - d, 0.0)


def _surrogate_dratio(ratio: float, advantage: float, epsilon: float) -> float:
    """d/d(ratio) of the clipped surrogate (the active branch of the min)."""
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    if ratio * advantage <= clipped * advantage:
        return advantage
    return advantage if 1.0 - epsilon < ratio < 1.0 + epsilon else 0.0


def grpo_objective(
    policy: TeacherPolicy,
    batches: Sequence[GroupBatch],
    config: GrpoConfig,
    theta: np.ndarray | None = None,
) -> tuple[float, np.ndarray, StepStats]:
    """Objective, its gradient w.r.t. the logits, and stats at ``theta``.

    The objective is the mean over every sample in every group of
    ``clipped_surrogate - kl_coefficient * kl_estimate``.
    """
    if not batches:
        raise EmptyBatch("grpo needs at least one group")
    current = policy if theta is None else policy.replace(theta=theta)
    eps, beta = config.clip_epsilon, config.kl_coefficient
    grad = np.zeros_like(current.theta)
    total = kls = advs = 0.0
    count = 0
    for batch in batches:
        adv = group_advantages(batch.rewards, config.std_floor)
        lp_new_all = current.logprobs(batch.category)
        lp_ref_all = current.logprobs(batch.category, current.theta_ref)
        for a, lp_old, A in zip(batch.actions, batch.logprobs_old, adv):
            lp_new, lp_ref = float(lp_new_all[a]), float(lp_ref_all[a])
            try:
                ratio = math.exp(lp_new - lp_old)
                kl = kl_estimate(lp_new, lp_ref)
            except OverflowError as exc:
                raise NonFiniteGradient(f"ratio or KL overflow in group {batch.query_id!r}") from exc
            total += clipped_surrogate(lp_new, lp_old, float(A), eps) - beta * kl
            kls += kl
            advs += float(A)
            count += 1
            # d kl / d lp_new = 1 - exp(lp_ref - lp_new)
            coef = _surrogate_dratio(ratio, float(A), eps) * ratio + beta * math.expm1(lp_ref - lp_new)
            if coef:
                grad += coef * policy_grad_logprob(current, batch.category, a)
    if count == 0:
        raise EmptyBatch("grpo groups are all empty")
    grad /= count
    stats = StepStats(total / count, kls / count, advs / count, float(np.linalg.norm(grad)))
    return total / count, grad, stats


def grpo_step(
    policy: TeacherPolicy, batches: Sequence[GroupBatch], config: GrpoConfig
) -> tuple[TeacherPolicy, StepStats]:
    """Run ``steps_per_round`` plain gradient-ascent steps; ``policy`` is left untouched.

    Returned stats describe the last step, evaluated before its update.
    """
    theta = policy.theta.copy()
    stats = None
    for _ in range(config.steps_per_round):
        _, grad, stats = grpo_objective(policy, batches, config, theta)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"non-finite gradient (norm={stats.grad_norm})")
        theta = theta + config.learning_rate * grad
    assert stats is not None
    return policy.replace(theta=theta), stats
