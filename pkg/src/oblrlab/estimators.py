"""Group advantage estimators and the sampled score-function gradient.

All advantage functions act on the last axis, so a ``(..., G)`` array of
group rewards yields a ``(..., G)`` array of advantages. The exact
enumeration code in :mod:`oblrlab.oracle` relies on this to evaluate every
possible batch at once.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .policy import PolicyParams, SampleBatch, greedy_output, probs
from .task import TaskSpec


class UnsupportedGroupSize(ValueError):
    pass


class Algorithm(str, enum.Enum):
    # Per-query expected reward under the current policy: the plain average
    # baseline, fixed given the parameters.
    MEAN = "mean"
    # In-group sample mean, sample included. Its expectation is (G-1)/G times
    # the true gradient.
    GROUP_MEAN = "group_mean"
    GRPO = "grpo"
    RLOO = "rloo"
    REMAX = "remax"
    OBLR = "oblr"
    # Baseline fixed per query and supplied by the caller; used by the exact
    # variance checks, not exposed as a training algorithm.
    FIXED = "fixed"


MIN_GROUP_SIZE = {
    Algorithm.MEAN: 1,
    Algorithm.GROUP_MEAN: 2,
    Algorithm.GRPO: 1,
    Algorithm.RLOO: 2,
    Algorithm.REMAX: 1,
    Algorithm.OBLR: 2,
    Algorithm.FIXED: 1,
}

# Additive perturbation of the group standard deviation. Only the oracle-check
# harness touches this, to prove that the GRPO golden check can fail.
_GRPO_STD_OFFSET = 0.0


@dataclass(frozen=True)
class AdvantageMethod:
    tag: Algorithm
    std_threshold: float = 1e-12
    weight_floor: float = 1e-12
    baseline: Optional[tuple[float, ...]] = field(default=None, compare=False)

    @classmethod
    def parse(cls, name: str | Algorithm, **options) -> "AdvantageMethod":
        try:
            tag = Algorithm(name)
        except ValueError:
            choices = ", ".join(a.value for a in Algorithm if a is not Algorithm.FIXED)
            raise ValueError(f"unknown algorithm {name!r}; choose one of {choices}") from None
        return cls(tag, **options)

    @classmethod
    def fixed(cls, baseline) -> "AdvantageMethod":
        return cls(Algorithm.FIXED, baseline=tuple(float(b) for b in baseline))

    @property
    def min_group_size(self) -> int:
        return MIN_GROUP_SIZE[self.tag]

    def check_group_size(self, g: int) -> None:
        if g < self.min_group_size:
            raise UnsupportedGroupSize(
                f"{self.tag.value} needs group size >= {self.min_group_size}, got {g}")


def _group_rewards(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim == 0 or r.shape[-1] == 0:
        raise ValueError("empty reward group")
    return r


def _shifted(r: np.ndarray) -> np.ndarray:
    # Centering estimators are shift invariant; removing the first reward
    # makes an all-equal group exactly zero instead of rounding noise.
    return r - r[..., :1]


def advantages_mean(rewards, expected_reward) -> np.ndarray:
    """Subtract the per-query expected reward (one value per group)."""
    r = _group_rewards(rewards)
    return r - np.asarray(expected_reward, dtype=float)[..., None]


def advantages_group_mean(rewards) -> np.ndarray:
    """Center each group by its own sample mean."""
    r = _shifted(_group_rewards(rewards))
    if r.shape[-1] < 2:
        raise UnsupportedGroupSize("group-mean baseline needs group size >= 2")
    return r - r.mean(axis=-1, keepdims=True)


def advantages_grpo(rewards, std_threshold: float = 1e-12) -> np.ndarray:
    """Group-standardized rewards with the population (divide-by-G) std.

    Groups whose std is below ``std_threshold`` get all-zero advantages.
    """
    r = _shifted(_group_rewards(rewards))
    centered = r - r.mean(axis=-1, keepdims=True)
    std = np.sqrt((centered ** 2).mean(axis=-1, keepdims=True)) + _GRPO_STD_OFFSET
    degenerate = std < std_threshold
    return np.where(degenerate, 0.0, centered / np.where(degenerate, 1.0, std))


def advantages_rloo(rewards) -> np.ndarray:
    r = _shifted(_group_rewards(rewards))
    g = r.shape[-1]
    if g < 2:
        raise UnsupportedGroupSize("RLOO needs group size >= 2")
    others = r.sum(axis=-1, keepdims=True) - r
    return r - others / (g - 1)


def advantages_remax(rewards, greedy_reward) -> np.ndarray:
    r = _group_rewards(rewards)
    return r - np.asarray(greedy_reward, dtype=float)[..., None]


def advantages_oblr(rewards, score_sq_norms, weight_floor: float = 1e-12) -> np.ndarray:
    """Leave-one-out baseline weighted by the other samples' squared score norms.

    Where the other samples' total weight is below ``weight_floor`` the
    baseline falls back to the plain leave-one-out mean.
    """
    r = _shifted(_group_rewards(rewards))
    w = np.asarray(score_sq_norms, dtype=float)
    if w.shape != r.shape:
        raise ValueError("weights and rewards must have the same shape")
    if np.any(w < 0):
        raise ValueError("score norms must be non-negative")
    g = r.shape[-1]
    if g < 2:
        raise UnsupportedGroupSize("OBLR needs group size >= 2")
    others = ~np.eye(g, dtype=bool)
    # (..., G) @ (G, G): column i sums over j != i.
    w_sum = w @ others
    wr_sum = (w * r) @ others
    loo_mean = (r @ others) / (g - 1)
    ok = w_sum >= weight_floor
    baseline = np.where(ok, wr_sum / np.where(ok, w_sum, 1.0), loo_mean)
    return r - baseline


def expected_rewards(task: TaskSpec, params: PolicyParams) -> np.ndarray:
    """Expected reward of every query under the current policy."""
    return np.array([probs(params, q) @ task.rewards[q] for q in range(task.num_queries)])


def greedy_rewards(task: TaskSpec, params: PolicyParams) -> np.ndarray:
    """Reward of the highest-probability output for every query."""
    return np.array([task.rewards[q][greedy_output(params, q)]
                     for q in range(task.num_queries)])


def group_advantages(method: AdvantageMethod, queries: np.ndarray, rewards: np.ndarray,
                     scores: np.ndarray, task: TaskSpec, params: PolicyParams) -> np.ndarray:
    """Advantages for groups shaped ``(..., G)``; ``queries`` is shaped ``(...)``
    and ``scores`` ``(..., G, d)``."""
    method.check_group_size(rewards.shape[-1])
    tag = method.tag
    if tag is Algorithm.MEAN:
        return advantages_mean(rewards, expected_rewards(task, params)[queries])
    if tag is Algorithm.GROUP_MEAN:
        return advantages_group_mean(rewards)
    if tag is Algorithm.GRPO:
        return advantages_grpo(rewards, method.std_threshold)
    if tag is Algorithm.RLOO:
        return advantages_rloo(rewards)
    if tag is Algorithm.REMAX:
        return advantages_remax(rewards, greedy_rewards(task, params)[queries])
    if tag is Algorithm.OBLR:
        return advantages_oblr(rewards, (scores ** 2).sum(axis=-1), method.weight_floor)
    if tag is Algorithm.FIXED:
        if method.baseline is None or len(method.baseline) != task.num_queries:
            raise ValueError("fixed baseline needs one value per query")
        return rewards - np.asarray(method.baseline)[queries][..., None]
    raise AssertionError(tag)


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    vector: np.ndarray
    per_sample_terms: np.ndarray  # (N*G, d)
    advantages: np.ndarray        # (N, G)
    num_queries: int
    group_size: int


def estimate_gradient(batch: SampleBatch, method: AdvantageMethod, task: TaskSpec,
                      params: PolicyParams) -> GradientEstimate:
    """Mean over the batch of ``score(q, o) * advantage(q, o)``."""
    params.check_matches(task)
    if batch.scores.shape[-1] != params.dim:
        raise ValueError("batch scores do not match the parameter dimension")
    adv = group_advantages(method, batch.queries, batch.rewards, batch.scores, task, params)
    terms = (batch.scores * adv[..., None]).reshape(-1, params.dim)
    return GradientEstimate(terms.mean(axis=0), terms, adv,
                            batch.num_queries, batch.group_size)
