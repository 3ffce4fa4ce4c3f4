"""Exact ground truth by enumeration over the finite task.

Everything here is a closed-form sum over queries and outputs, or an explicit
enumeration of every possible sampled batch weighted by its probability.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .estimators import (AdvantageMethod, Algorithm, expected_rewards, greedy_rewards,
                         group_advantages)
from .policy import PolicyParams, all_probs
from .task import TaskSpec, optimal_value

MATRIX_DIM_LIMIT = 64
INF_SNR = math.inf


class Constants(NamedTuple):
    B: float
    L: float
    M: float

    @property
    def smoothness(self) -> float:
        """Smoothness constant ``B*L + B^2*M`` of the expected reward."""
        return self.B * self.L + self.B ** 2 * self.M


def constants(task: TaskSpec, tightened: bool = False) -> Constants:
    """Reward bound, log-likelihood smoothness and score-norm budget.

    The Hessian of ``log pi(o|q)`` is ``-(diag(pi) - pi pi^T)`` on the query's
    block. ``L = 1`` bounds its spectral norm; the tightened value 1/2 is the
    largest variance of a unit projection of a one-hot vector.
    ``M = 2 * d`` since every squared score norm is at most 2.
    """
    B = max(float(np.max(np.abs(row))) for row in task.rewards)
    if tightened:
        L = 0.5 if max(task.outputs_per_query) > 1 else 0.0
    else:
        L = 1.0
    return Constants(B, L, 2.0 * task.dim)


def expected_reward(task: TaskSpec, params: PolicyParams) -> float:
    return float(sum(w * p @ f for w, p, f in
                     zip(task.query_probs, all_probs(params), task.rewards)))


def exact_loss(task: TaskSpec, params: PolicyParams) -> float:
    return max(optimal_value(task) - expected_reward(task, params), 0.0)


def expected_reward_many(task: TaskSpec, thetas: np.ndarray) -> np.ndarray:
    """Expected reward for a stack of flat parameter vectors ``(K, d)``."""
    thetas = np.atleast_2d(thetas)
    total = np.zeros(thetas.shape[0])
    for q, w in enumerate(task.query_probs):
        z = thetas[:, task.block(q)]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        total += w * (e @ task.rewards[q]) / e.sum(axis=1)
    return total


def exact_grad(task: TaskSpec, params: PolicyParams) -> np.ndarray:
    params.check_matches(task)
    out = np.zeros(params.dim)
    for q, (w, p, f) in enumerate(zip(task.query_probs, all_probs(params), task.rewards)):
        out[task.block(q)] = w * (p * f - p * (p @ f))
    return out


def mean_baseline(task: TaskSpec, params: PolicyParams) -> np.ndarray:
    """Per-query expected reward."""
    return expected_rewards(task, params)


def optimal_baseline(task: TaskSpec, params: PolicyParams) -> np.ndarray:
    """Per-query baseline minimising tr H: the score-norm-weighted mean reward."""
    out = np.empty(task.num_queries)
    for q, (p, f) in enumerate(zip(all_probs(params), task.rewards)):
        weights = p * (1.0 - 2.0 * p + p @ p)
        den = weights.sum()
        out[q] = (weights @ f) / den if den >= 1e-12 else p @ f
    return out


def reference_baseline(task: TaskSpec, params: PolicyParams,
                       method: AdvantageMethod) -> np.ndarray:
    """Fixed per-query baseline that the exact diagnostics use for ``method``.

    OBLR targets the optimal baseline, ReMax uses its greedy reward, a fixed
    method uses its own values; the rest are compared with the expected reward.
    """
    if method.tag is Algorithm.OBLR:
        return optimal_baseline(task, params)
    if method.tag is Algorithm.REMAX:
        return greedy_rewards(task, params)
    if method.tag is Algorithm.FIXED:
        return np.asarray(method.baseline, dtype=float)
    return mean_baseline(task, params)


def _check_baseline(task: TaskSpec, baseline) -> np.ndarray:
    b = np.asarray(baseline, dtype=float).reshape(-1)
    if b.size != task.num_queries:
        raise ValueError(f"baseline has {b.size} entries for {task.num_queries} queries")
    return b


def _blocks(task: TaskSpec, params: PolicyParams, baseline):
    """Yield (q, query prob, output probs, in-block sample vectors X[o])."""
    params.check_matches(task)
    b = _check_baseline(task, baseline)
    for q, (w, p, f) in enumerate(zip(task.query_probs, all_probs(params), task.rewards)):
        s = np.eye(p.size) - p[None, :]
        yield q, w, p, s * (f - b[q])[:, None]


def _want_matrix(dim: int, matrices) -> bool:
    if matrices == "auto":
        return dim <= MATRIX_DIM_LIMIT
    return bool(matrices)


def exact_H(task: TaskSpec, params: PolicyParams, baseline, matrices="auto"):
    """Covariance of one sample ``score(q,o) * (F(q,o) - b(q))`` over (q, o).

    Returns ``(matrix or None, trace)``.
    """
    g = exact_grad(task, params)
    want = _want_matrix(params.dim, matrices)
    second = np.zeros((params.dim, params.dim)) if want else None
    sq = 0.0
    for q, w, p, x in _blocks(task, params, baseline):
        sq += w * float(p @ (x ** 2).sum(axis=1))
        if want:
            blk = task.block(q)
            second[blk, blk] += w * (x.T * p) @ x
    # Both matrices are covariances; clip the rounding residue of an exact zero.
    trace = max(sq - float(g @ g), 0.0)
    if want:
        return second - np.outer(g, g), trace
    return None, trace


def exact_C(task: TaskSpec, params: PolicyParams, baseline, matrices="auto"):
    """Covariance between two i.i.d. samples sharing a query.

    ``E_q[m(q) m(q)^T] - gJ gJ^T`` with ``m(q)`` the conditional mean sample.
    """
    g = exact_grad(task, params)
    want = _want_matrix(params.dim, matrices)
    second = np.zeros((params.dim, params.dim)) if want else None
    sq = 0.0
    for q, w, p, x in _blocks(task, params, baseline):
        m = p @ x
        sq += w * float(m @ m)
        if want:
            blk = task.block(q)
            second[blk, blk] += w * np.outer(m, m)
    # Both matrices are covariances; clip the rounding residue of an exact zero.
    trace = max(sq - float(g @ g), 0.0)
    if want:
        return second - np.outer(g, g), trace
    return None, trace


def trace_H(task: TaskSpec, params: PolicyParams, baseline) -> float:
    return exact_H(task, params, baseline, matrices=False)[1]


def trace_H_many(task: TaskSpec, params: PolicyParams, baselines) -> np.ndarray:
    """``trace_H`` for every row of a ``(K, |Q|)`` array of baselines."""
    b = np.atleast_2d(np.asarray(baselines, dtype=float))
    if b.shape[1] != task.num_queries:
        raise ValueError(f"baselines need {task.num_queries} columns, got {b.shape[1]}")
    params.check_matches(task)
    g = exact_grad(task, params)
    total = np.zeros(b.shape[0])
    for q, (w, p, f) in enumerate(zip(task.query_probs, all_probs(params), task.rewards)):
        norms = 1.0 - 2.0 * p + p @ p
        total += w * (((f[None, :] - b[:, q:q + 1]) ** 2) @ (p * norms))
    return np.maximum(total - float(g @ g), 0.0)


def trace_C(task: TaskSpec, params: PolicyParams, baseline) -> float:
    return exact_C(task, params, baseline, matrices=False)[1]


def exact_var_estimator(task: TaskSpec, params: PolicyParams, baseline,
                        n: int, g: int) -> float:
    """Trace of the batch estimator covariance predicted from tr H and tr C."""
    if n < 1 or g < 1:
        raise ValueError("n and g must be >= 1")
    tr_h = trace_H(task, params, baseline)
    tr_c = trace_C(task, params, baseline) if g > 1 else 0.0
    return tr_h / (n * g) + (g - 1) * tr_c / (n * g)


def exact_snr(task: TaskSpec, params: PolicyParams, baseline) -> float:
    g = exact_grad(task, params)
    tr_h = trace_H(task, params, baseline)
    signal = float(g @ g)
    if tr_h <= 0.0:
        return INF_SNR if signal > 0.0 else 0.0
    return signal / tr_h


@dataclass(frozen=True, eq=False)
class ExactStats:
    grad_J: np.ndarray
    loss: float
    H: Optional[np.ndarray]
    C: Optional[np.ndarray]
    tr_H: float
    tr_C: float
    snr: float
    b_star: np.ndarray
    baseline: np.ndarray

    @property
    def grad_sq(self) -> float:
        return float(self.grad_J @ self.grad_J)


def exact_stats(task: TaskSpec, params: PolicyParams, baseline=None,
                matrices="auto") -> ExactStats:
    """Bundle of oracle quantities; ``baseline`` defaults to the optimal one."""
    b_star = optimal_baseline(task, params)
    b = b_star if baseline is None else _check_baseline(task, baseline)
    grad = exact_grad(task, params)
    H, tr_h = exact_H(task, params, b, matrices)
    C, tr_c = exact_C(task, params, b, matrices)
    signal = float(grad @ grad)
    if tr_h > 0.0:
        snr = signal / tr_h
    else:
        snr = INF_SNR if signal > 0.0 else 0.0
    return ExactStats(grad, exact_loss(task, params), H, C, tr_h, tr_c, snr, b_star, b)


# -- enumeration of sampled batches ----------------------------------------------


@dataclass(frozen=True, eq=False)
class GroupOutcomes:
    """Every possible single-query group of ``G`` outputs with its probability."""

    weights: np.ndarray   # (K,)
    queries: np.ndarray   # (K,)
    outputs: np.ndarray   # (K, G)
    rewards: np.ndarray   # (K, G)
    scores: np.ndarray    # (K, G, d)


def group_outcomes(task: TaskSpec, params: PolicyParams, g: int) -> GroupOutcomes:
    params.check_matches(task)
    weights, queries, outputs = [], [], []
    probs = all_probs(params)
    for q, w in enumerate(task.query_probs):
        n_out = task.outputs_per_query[q]
        combos = np.array(list(itertools.product(range(n_out), repeat=g)), dtype=int)
        weights.append(w * np.prod(probs[q][combos], axis=1))
        queries.append(np.full(len(combos), q))
        outputs.append(combos)
    weights = np.concatenate(weights)
    queries = np.concatenate(queries)
    outputs = np.concatenate(outputs)
    rewards = np.empty(outputs.shape)
    scores = np.zeros(outputs.shape + (params.dim,))
    for q in range(task.num_queries):
        rows = queries == q
        p = probs[q]
        rewards[rows] = task.rewards[q][outputs[rows]]
        scores[rows, :, task.block(q)] = np.eye(p.size)[outputs[rows]] - p
    return GroupOutcomes(weights, queries, outputs, rewards, scores)


def group_estimates(task: TaskSpec, params: PolicyParams, method: AdvantageMethod,
                    g: int) -> tuple[np.ndarray, np.ndarray]:
    """Probability and gradient estimate of every possible single-query batch."""
    out = group_outcomes(task, params, g)
    adv = group_advantages(method, out.queries, out.rewards, out.scores, task, params)
    est = (out.scores * adv[..., None]).mean(axis=1)
    return out.weights, est


def batch_estimates(task: TaskSpec, params: PolicyParams, method: AdvantageMethod,
                    n: int, g: int, max_outcomes: int = 2_000_000):
    """Literal enumeration of every ``n``-query batch: (probabilities, estimates)."""
    w1, v1 = group_estimates(task, params, method, g)
    if len(w1) ** n > max_outcomes:
        raise ValueError(f"{len(w1)}^{n} batch outcomes exceed the limit {max_outcomes}")
    weights, sums = w1, v1
    for _ in range(n - 1):
        weights = (weights[:, None] * w1[None, :]).reshape(-1)
        sums = (sums[:, None, :] + v1[None, :, :]).reshape(-1, v1.shape[1])
    return weights, sums / n


@dataclass(frozen=True, eq=False)
class Moments:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def trace(self) -> float:
        return float(np.trace(self.cov))


def _weighted_moments(weights: np.ndarray, vectors: np.ndarray) -> Moments:
    mean = weights @ vectors
    centered = vectors - mean
    cov = (centered.T * weights) @ centered
    return Moments(mean, cov)


def estimator_moments(task: TaskSpec, params: PolicyParams, method: AdvantageMethod,
                      n: int, g: int, literal: bool = False) -> Moments:
    """Exact mean and covariance of the batch gradient estimator.

    With ``literal`` every ``n``-query batch is enumerated; otherwise the
    covariance of one group is divided by ``n`` (groups are i.i.d.).
    """
    if literal:
        return _weighted_moments(*batch_estimates(task, params, method, n, g))
    one = _weighted_moments(*group_estimates(task, params, method, g))
    return Moments(one.mean, one.cov / n)


def estimator_variance(task: TaskSpec, params: PolicyParams, method: AdvantageMethod,
                       n: int, g: int) -> float:
    """Trace of the exact covariance of the batch estimator."""
    w, v = group_estimates(task, params, method, g)
    mean = w @ v
    return float(w @ ((v - mean) ** 2).sum(axis=1)) / n
