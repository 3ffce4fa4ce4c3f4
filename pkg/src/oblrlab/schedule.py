"""Step-size rules driven by the gradient signal-to-noise ratio, and the
per-step query budget allocator."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .policy import SampleBatch

INF = math.inf
SNR_VAR_FLOOR = 1e-12


class LrMode(str, enum.Enum):
    FIXED = "fixed"
    ADAPTIVE_EXACT = "adaptive_exact"
    ADAPTIVE_EMPIRICAL = "adaptive_empirical"


class SnrBasis(str, enum.Enum):
    RAW_REWARD = "raw_reward"
    ADVANTAGE = "advantage"


@dataclass(frozen=True)
class LrPolicy:
    """How the step size is chosen each step.

    In ``adaptive_exact`` mode the scale is ``1 / (B L + B^2 M)`` unless
    ``theory_scale`` is turned off, in which case ``eta0`` is used.
    """

    mode: LrMode = LrMode.ADAPTIVE_EMPIRICAL
    eta0: float = 0.5
    snr_basis: SnrBasis = SnrBasis.RAW_REWARD
    debias_signal: bool = False
    theory_scale: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", LrMode(self.mode))
        object.__setattr__(self, "snr_basis", SnrBasis(self.snr_basis))
        if not self.eta0 > 0:
            raise ValueError("eta0 must be > 0")

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "eta0": self.eta0,
                "snr_basis": self.snr_basis.value,
                "debias_signal": self.debias_signal,
                "theory_scale": self.theory_scale}


def snr_fraction(snr: float, n: int) -> float:
    """``n*snr / (1 + n*snr)`` with the infinite-SNR limit equal to 1."""
    if snr == INF:
        return 1.0
    x = n * snr
    return x / (1.0 + x)


def optimal_lr_exact(grad_sq: float, tr_H: float, n: int, B: float, L: float,
                     M: float) -> float:
    """Minimiser of the per-step loss bound for known gradient and noise."""
    if grad_sq < 0 or tr_H < 0 or n < 1:
        raise ValueError("grad_sq and tr_H must be >= 0 and n >= 1")
    k = B * L + B * B * M
    if k <= 0:
        raise ValueError("B*L + B^2*M must be positive")
    if grad_sq == 0.0:
        return 0.0
    # grad_sq / (grad_sq + tr_H / n) avoids forming the SNR when tr_H == 0.
    return grad_sq / (grad_sq + tr_H / n) / k


def step_bound_quadratic(eta: float, grad_sq: float, tr_H: float, n: int,
                         smoothness: float) -> float:
    """Per-step change of the loss upper bound as a function of the step size."""
    return -eta * grad_sq + 0.5 * smoothness * eta ** 2 * (grad_sq + tr_H / n)


def adaptive_lr(snr: float, n: int, eta0: float) -> float:
    if not eta0 > 0:
        raise ValueError("eta0 must be > 0")
    if snr < 0:
        raise ValueError("snr must be >= 0")
    return eta0 * snr_fraction(snr, n)


def empirical_snr(batch: SampleBatch, basis: SnrBasis = SnrBasis.RAW_REWARD,
                  debias: bool = False, advantages: Optional[np.ndarray] = None) -> float:
    """Batch estimate ``||mu||^2 / sigma^2`` of the gradient SNR.

    ``mu`` is the mean of the per-sample vectors ``score * weight`` and
    ``sigma^2`` their unbiased total variance. The weight is the raw reward
    or, with ``SnrBasis.ADVANTAGE``, the supplied advantages.
    """
    basis = SnrBasis(basis)
    if basis is SnrBasis.RAW_REWARD:
        weight = batch.rewards
    else:
        if advantages is None:
            raise ValueError("advantage basis needs the batch advantages")
        weight = np.asarray(advantages)
    v = (batch.scores * weight[..., None]).reshape(-1, batch.scores.shape[-1])
    k = v.shape[0]
    if k < 2:
        raise ValueError("empirical SNR needs at least 2 samples")
    mu = v.mean(axis=0)
    var = float(((v - mu) ** 2).sum()) / (k - 1)
    signal = float(mu @ mu)
    if debias:
        signal = max(0.0, signal - var / k)
    if var < SNR_VAR_FLOOR:
        return INF
    return signal / var


class InfeasibleBudget(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AllocationPlan:
    counts: np.ndarray       # integer N_t, sums to the budget
    continuous: np.ndarray   # water-filled real-valued solution
    budget: int
    clamped: bool
    residual: float          # spread of sqrt(trH_t) / (N_t + trH_t / grad_sq_t) over free steps

    def to_dict(self) -> dict:
        return {"N_t": [int(n) for n in self.counts],
                "continuous": self.continuous.tolist(),
                "budget": self.budget,
                "clamped": self.clamped,
                "certificate_residual": self.residual}


def bound_objective(counts, tr_H, grad_sq) -> float:
    """``sum_t trH_t / (N_t + trH_t / grad_sq_t)``; smaller is better."""
    n = np.asarray(counts, dtype=float)
    h = np.asarray(tr_H, dtype=float)
    r = h / np.asarray(grad_sq, dtype=float)
    return float((h / (n + r)).sum())


def _water_fill(h: np.ndarray, r: np.ndarray, budget: float):
    free = np.ones(h.size, dtype=bool)
    n = np.ones(h.size)
    while free.any():
        c_free = budget - (~free).sum()
        lam = (c_free + r[free].sum()) / np.sqrt(h[free]).sum()
        n[free] = lam * np.sqrt(h[free]) - r[free]
        low = free & (n < 1.0)
        if not low.any():
            return n, free
        free &= ~low
        n[~free] = 1.0
    return n, free


def _round_to_budget(x: np.ndarray, budget: int) -> np.ndarray:
    counts = np.floor(x).astype(int)
    short = budget - counts.sum()
    # Largest remainder first; ties go to the earlier step.
    order = sorted(range(x.size), key=lambda t: (-(x[t] - counts[t]), t))
    for t in order[:short]:
        counts[t] += 1
    return counts


def _exchange_polish(counts: np.ndarray, h: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Move single queries between steps while that lowers the objective.

    The objective is separable and convex in each count, so a plan with no
    improving single move is the integer optimum.
    """
    counts = counts.copy()
    while True:
        gain = h / (counts + r) - h / (counts + 1 + r)    # benefit of +1
        loss = h / (counts - 1 + r) - h / (counts + r)    # cost of -1
        loss[counts <= 1] = np.inf
        give, take = int(np.argmin(loss)), int(np.argmax(gain))
        if give == take or gain[take] - loss[give] <= 1e-15 * (1 + abs(gain[take])):
            return counts
        counts[give] -= 1
        counts[take] += 1


def allocate_budget(tr_H: Sequence[float], grad_sq: Sequence[float],
                    budget: int) -> AllocationPlan:
    """Split ``budget`` queries over steps to minimise the loss bound.

    The closed-form split ``N_t = lam sqrt(trH_t) - trH_t / grad_sq_t`` is
    water-filled so every step keeps at least one query, rounded by largest
    remainder, then polished to the integer optimum.
    """
    h = np.asarray(tr_H, dtype=float)
    g = np.asarray(grad_sq, dtype=float)
    if h.ndim != 1 or h.shape != g.shape or h.size == 0:
        raise ValueError("tr_H and grad_sq must be non-empty vectors of equal length")
    if np.any(h <= 0) or np.any(g <= 0):
        raise ValueError("tr_H and grad_sq entries must be > 0")
    if int(budget) != budget:
        raise ValueError("budget must be an integer")
    budget = int(budget)
    if budget < h.size:
        raise InfeasibleBudget(f"budget {budget} is below the minimum {h.size} (one query per step)")
    r = h / g
    cont, free = _water_fill(h, r, float(budget))
    counts = _exchange_polish(_round_to_budget(cont, budget), h, r)
    ratio = np.sqrt(h[free]) / (cont[free] + r[free])
    residual = float(ratio.max() - ratio.min()) if ratio.size else 0.0
    # A step sitting exactly at the one-query floor counts as clamped too.
    clamped = bool(np.any(cont <= 1.0 + 1e-12))
    return AllocationPlan(counts, cont, budget, clamped, residual)
