"""Tabular softmax policy over a :class:`~oblrlab.task.TaskSpec`.

Parameters are one logit per (query, output) pair, stored flat in query-major
order. The score of output ``o`` under query ``q`` is ``e_(q,o) - pi(.|q)``
embedded in the query's block and zero elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .task import TaskSpec


@dataclass(frozen=True, eq=False)
class PolicyParams:
    theta: np.ndarray
    sizes: tuple[int, ...]

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        sizes = tuple(int(s) for s in self.sizes)
        if any(s < 1 for s in sizes) or theta.size != sum(sizes):
            raise ValueError(f"logit vector of length {theta.size} does not fit sizes {sizes}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("logits must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def zeros(cls, task: TaskSpec) -> "PolicyParams":
        return cls(np.zeros(task.dim), task.outputs_per_query)

    @classmethod
    def from_logits(cls, logits: Sequence[Sequence[float]]) -> "PolicyParams":
        rows = [np.asarray(r, dtype=float).reshape(-1) for r in logits]
        return cls(np.concatenate(rows), tuple(r.size for r in rows))

    @property
    def dim(self) -> int:
        return self.theta.size

    @property
    def logits(self) -> list[np.ndarray]:
        return np.split(self.theta, np.cumsum(self.sizes)[:-1])

    def block(self, q: int) -> np.ndarray:
        if not 0 <= q < len(self.sizes):
            raise IndexError(f"query index {q} out of range")
        start = sum(self.sizes[:q])
        return self.theta[start:start + self.sizes[q]]

    def updated(self, direction: np.ndarray, step: float) -> "PolicyParams":
        return PolicyParams(self.theta + step * np.asarray(direction), self.sizes)

    def check_matches(self, task: TaskSpec) -> None:
        if self.sizes != task.outputs_per_query:
            raise ValueError(
                f"params shape {self.sizes} does not match task {task.outputs_per_query}")

    def to_dict(self) -> dict:
        return {"logits": [row.tolist() for row in self.logits]}

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyParams":
        return cls.from_logits(doc["logits"])


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def probs(params: PolicyParams, q: int) -> np.ndarray:
    return np.exp(_log_softmax(params.block(q)))


def all_probs(params: PolicyParams) -> list[np.ndarray]:
    return [probs(params, q) for q in range(len(params.sizes))]


def _check_output(params: PolicyParams, q: int, o: int) -> None:
    if not 0 <= q < len(params.sizes):
        raise IndexError(f"query index {q} out of range")
    if not 0 <= o < params.sizes[q]:
        raise IndexError(f"output index {o} out of range for query {q}")


def log_prob(params: PolicyParams, q: int, o: int) -> float:
    _check_output(params, q, o)
    return float(_log_softmax(params.block(q))[o])


def score(params: PolicyParams, q: int, o: int) -> np.ndarray:
    """Gradient of ``log pi(o|q)`` with respect to the flat logit vector."""
    _check_output(params, q, o)
    out = np.zeros(params.dim)
    start = sum(params.sizes[:q])
    p = probs(params, q)
    out[start:start + p.size] = -p
    out[start + o] += 1.0
    return out


def score_block(params: PolicyParams, q: int) -> np.ndarray:
    """Rows are the in-block scores of every output of ``q``: ``I - 1 pi^T``."""
    p = probs(params, q)
    return np.eye(p.size) - p[None, :]


def score_sq_norms(params: PolicyParams, q: int) -> np.ndarray:
    """``||score(q, o)||^2 = 1 - 2 pi_o + sum pi^2`` for every output ``o``."""
    p = probs(params, q)
    return 1.0 - 2.0 * p + p @ p


def greedy_output(params: PolicyParams, q: int) -> int:
    # np.argmax returns the first maximum: ties go to the lowest index.
    return int(np.argmax(params.block(q)))


def entropy(params: PolicyParams, task: TaskSpec) -> float:
    params.check_matches(task)
    total = 0.0
    for q, w in enumerate(task.query_probs):
        logp = _log_softmax(params.block(q))
        total += w * float(-(np.exp(logp) * logp).sum())
    return total


def kl_to(params: PolicyParams, ref_params: PolicyParams, task: TaskSpec) -> float:
    """E_q KL(pi_params(.|q) || pi_ref(.|q))."""
    params.check_matches(task)
    ref_params.check_matches(task)
    total = 0.0
    for q, w in enumerate(task.query_probs):
        logp = _log_softmax(params.block(q))
        logr = _log_softmax(ref_params.block(q))
        total += w * float((np.exp(logp) * (logp - logr)).sum())
    return max(total, 0.0)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """One step's draws: ``num_queries`` groups of ``group_size`` outputs.

    ``scores[j, i]`` is the full length-d score vector of sample ``i`` in group ``j``.
    """

    queries: np.ndarray   # (N,)
    outputs: np.ndarray   # (N, G)
    rewards: np.ndarray   # (N, G)
    scores: np.ndarray    # (N, G, d)

    @property
    def num_queries(self) -> int:
        return self.outputs.shape[0]

    @property
    def group_size(self) -> int:
        return self.outputs.shape[1]

    def entries(self) -> Iterator[tuple[int, int, float, np.ndarray]]:
        for j, q in enumerate(self.queries):
            for i in range(self.group_size):
                yield int(q), int(self.outputs[j, i]), float(self.rewards[j, i]), self.scores[j, i]


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Generator keyed by (run seed, step); independent of execution order."""
    return np.random.default_rng([int(seed), int(step)])


def _inverse_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, p.size - 1)


def sample_batch(params: PolicyParams, task: TaskSpec, n: int, g: int,
                 rng: np.random.Generator) -> SampleBatch:
    """Draw ``n`` queries from the task and ``g`` i.i.d. outputs per query."""
    if n < 1 or g < 1:
        raise ValueError("batch needs n >= 1 and g >= 1")
    params.check_matches(task)
    u_query = rng.random(n)
    u_out = rng.random((n, g))
    queries = _inverse_cdf(task.query_probs, u_query)
    outputs = np.empty((n, g), dtype=int)
    rewards = np.empty((n, g))
    scores = np.zeros((n, g, params.dim))
    offsets = task.offsets
    for j, q in enumerate(queries):
        p = probs(params, q)
        o = _inverse_cdf(p, u_out[j])
        outputs[j] = o
        rewards[j] = task.rewards[q][o]
        blk = slice(offsets[q], offsets[q] + p.size)
        scores[j, :, blk] = np.eye(p.size)[o] - p
    return SampleBatch(queries.astype(int), outputs, rewards, scores)
