"""Finite synthetic tasks: a query distribution, per-query output sets and a
bounded reward table."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """Query distribution, reward table ``rewards[q][o]`` and reward bound.

    The reward table may be ragged: query ``q`` has ``len(rewards[q])`` outputs.
    Instances are immutable; arrays are marked read-only.
    """

    query_probs: np.ndarray
    rewards: tuple[np.ndarray, ...]
    reward_bound: float

    def __post_init__(self):
        probs = _frozen(self.query_probs)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("query_probs must be a non-empty vector")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValueError("query_probs must be finite and non-negative")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"query_probs sum to {probs.sum()!r}, expected 1")
        rewards = tuple(_frozen(r) for r in self.rewards)
        if len(rewards) != probs.size:
            raise ValueError(
                f"{len(rewards)} reward rows for {probs.size} queries")
        for q, row in enumerate(rewards):
            if row.ndim != 1 or row.size == 0:
                raise ValueError(f"query {q} has no outputs")
            if not np.all(np.isfinite(row)):
                raise ValueError(f"query {q} has non-finite rewards")
        bound = float(self.reward_bound)
        if not np.isfinite(bound) or bound < 0:
            raise ValueError("reward_bound must be finite and >= 0")
        worst = max(float(np.max(np.abs(row))) for row in rewards)
        if worst > bound:
            raise ValueError(f"reward {worst!r} exceeds bound {bound!r}")
        object.__setattr__(self, "query_probs", probs)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "reward_bound", bound)

    @property
    def num_queries(self) -> int:
        return self.query_probs.size

    @property
    def outputs_per_query(self) -> tuple[int, ...]:
        return tuple(row.size for row in self.rewards)

    @property
    def dim(self) -> int:
        """Flattened parameter dimension, one logit per (query, output)."""
        return sum(self.outputs_per_query)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(np.concatenate([[0], np.cumsum(self.outputs_per_query)[:-1]]).astype(int))

    def block(self, q: int) -> slice:
        start = self.offsets[q]
        return slice(start, start + self.outputs_per_query[q])

    def flat_rewards(self) -> np.ndarray:
        return np.concatenate(self.rewards)

    def to_dict(self) -> dict:
        return {
            "query_probs": self.query_probs.tolist(),
            "rewards": [row.tolist() for row in self.rewards],
            "reward_bound": self.reward_bound,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TaskSpec":
        try:
            probs, rewards = doc["query_probs"], doc["rewards"]
        except KeyError as exc:
            raise ValueError(f"task document is missing field {exc.args[0]!r}") from None
        bound = doc.get("reward_bound")
        if bound is None:
            bound = max(abs(float(x)) for row in rewards for x in row)
        return cls(probs, tuple(rewards), bound)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "TaskSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_random_task(num_queries: int, num_outputs: int, reward_bound: float,
                     seed: int) -> TaskSpec:
    """Uniform query distribution with rewards drawn i.i.d. from U[-B, B]."""
    if num_queries < 1 or num_outputs < 1:
        raise ValueError("num_queries and num_outputs must be >= 1")
    if not reward_bound > 0:
        raise ValueError("reward_bound must be > 0")
    rng = np.random.default_rng(seed)
    table = rng.uniform(-reward_bound, reward_bound, size=(num_queries, num_outputs))
    probs = np.full(num_queries, 1.0 / num_queries)
    # 1/Q summed Q times can miss 1 by an ulp or two; that is inside PROB_TOL.
    return TaskSpec(probs, tuple(table), reward_bound)


def make_table_task(query_probs: Sequence[float],
                    rewards: Sequence[Sequence[float]]) -> TaskSpec:
    """Explicit task; the bound is the largest absolute reward."""
    rows = tuple(np.asarray(r, dtype=float) for r in rewards)
    if any(r.size == 0 for r in rows):
        raise ValueError("every query needs at least one output")
    bound = max(float(np.max(np.abs(r))) for r in rows)
    return TaskSpec(query_probs, rows, bound)


def optimal_value(task: TaskSpec) -> float:
    """sup over softmax policies of the expected reward: sum_q p(q) max_o F(q, o)."""
    return float(sum(p * row.max() for p, row in zip(task.query_probs, task.rewards)))
