"""Online gradient ascent with per-step exact diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import oracle
from .estimators import AdvantageMethod, estimate_gradient
from .policy import PolicyParams, batch_rng, entropy, kl_to, sample_batch
from .schedule import (LrMode, LrPolicy, adaptive_lr, empirical_snr, optimal_lr_exact,
                       snr_fraction)
from .task import TaskSpec, optimal_value

CSV_COLUMNS = ("step", "eta", "loss", "grad_norm_exact", "grad_norm_emp", "adv_mean",
               "adv_abs_mean", "snr_emp", "snr_exact", "tr_H", "entropy", "kl")


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec
    algorithm: AdvantageMethod
    lr: LrPolicy = field(default_factory=LrPolicy)
    steps: int = 200
    n: int = 4
    g: int = 4
    seed: int = 0
    exact_stats_every: int = 1
    keep_trajectory: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.n < 1:
            raise ValueError("steps and n must be >= 1")
        if self.exact_stats_every < 1:
            raise ValueError("exact_stats_every must be >= 1")
        self.algorithm.check_group_size(self.g)
        if self.lr.mode is LrMode.ADAPTIVE_EMPIRICAL and self.n * self.g < 2:
            raise ValueError("empirical SNR needs n * g >= 2")

    def to_dict(self) -> dict:
        return {"task": self.task.to_dict(), "algorithm": self.algorithm.tag.value,
                "lr": self.lr.to_dict(), "steps": self.steps, "N": self.n, "G": self.g,
                "seed": self.seed,
                "diagnostics": {"exact_stats_every": self.exact_stats_every}}


@dataclass
class RunRecord:
    config: RunConfig
    constants: oracle.Constants
    rows: list[dict]
    final_params: PolicyParams
    trajectory: Optional[list[np.ndarray]] = None

    @property
    def final_loss(self) -> float:
        return oracle.exact_loss(self.config.task, self.final_params)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows])

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(["" if row[c] is None else repr(row[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def sidecar(self) -> dict:
        c = self.constants
        return {"config": self.config.to_dict(), "seed": self.config.seed,
                "constants": {"B": c.B, "L": c.L, "M": c.M},
                "final_params": self.final_params.to_dict(),
                "final_loss": self.final_loss}

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.csv_text())
        (out / "run.json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True))


def _float(x) -> Optional[float]:
    return None if x is None else float(x)


def step(params: PolicyParams, task: TaskSpec, config: RunConfig,
         rng: np.random.Generator, t: int,
         init_params: Optional[PolicyParams] = None,
         consts: Optional[oracle.Constants] = None) -> tuple[PolicyParams, dict]:
    """One update: sample, pick the step size, estimate the gradient, ascend."""
    consts = consts or oracle.constants(task)
    init_params = init_params or PolicyParams.zeros(task)
    method, lr = config.algorithm, config.lr

    batch = sample_batch(params, task, config.n, config.g, rng)
    est = estimate_gradient(batch, method, task, params)
    snr_emp = None
    if config.n * config.g >= 2:
        snr_emp = empirical_snr(batch, lr.snr_basis, lr.debias_signal, est.advantages)

    grad = oracle.exact_grad(task, params)
    grad_sq = float(grad @ grad)
    diagnostic = t % config.exact_stats_every == 0
    tr_h = snr_exact = None
    if diagnostic or lr.mode is LrMode.ADAPTIVE_EXACT:
        baseline = oracle.reference_baseline(task, params, method)
        tr_h = oracle.trace_H(task, params, baseline)
        snr_exact = math.inf if tr_h <= 0 and grad_sq > 0 else (grad_sq / tr_h if tr_h > 0 else 0.0)

    if lr.mode is LrMode.FIXED:
        eta = lr.eta0
    elif lr.mode is LrMode.ADAPTIVE_EMPIRICAL:
        eta = adaptive_lr(snr_emp, config.n, lr.eta0)
    elif lr.theory_scale:
        eta = optimal_lr_exact(grad_sq, tr_h, config.n, *consts)
    else:
        eta = lr.eta0 * snr_fraction(snr_exact, config.n)

    row = {
        "step": t,
        "eta": float(eta),
        "loss": oracle.exact_loss(task, params),
        "grad_norm_exact": math.sqrt(grad_sq),
        "grad_norm_emp": float(np.linalg.norm(est.vector)),
        "adv_mean": float(est.advantages.mean()),
        "adv_abs_mean": float(np.abs(est.advantages).mean()),
        "snr_emp": _float(snr_emp),
        "snr_exact": _float(snr_exact) if diagnostic else None,
        "tr_H": _float(tr_h) if diagnostic else None,
        "entropy": entropy(params, task),
        "kl": kl_to(params, init_params, task),
    }
    if eta == 0.0:
        return params, row
    return params.updated(est.vector, eta), row


def run(config: RunConfig) -> RunRecord:
    """``config.steps`` updates from the uniform policy; deterministic per seed."""
    task = config.task
    consts = oracle.constants(task)
    init = PolicyParams.zeros(task)
    params = init
    rows = []
    trajectory = [params.theta] if config.keep_trajectory else None
    for t in range(config.steps):
        params, row = step(params, task, config, batch_rng(config.seed, t), t, init, consts)
        rows.append(row)
        if trajectory is not None:
            trajectory.append(params.theta)
    return RunRecord(config, consts, rows, params, trajectory)


# -- descent-bound verification ---------------------------------------------------

ENUMERATION_LIMIT = 6
MC_REPLICATES = 10_000
Z_99 = 2.5758293035489004
# Rounding allowance for sums over up to millions of enumerated batches.
BOUND_ATOL = 1e-12


@dataclass(frozen=True)
class DescentCheck:
    step: int
    eta: float
    loss: float
    expected_next_loss: float
    ci_halfwidth: float       # 0 for exact enumeration
    bound: float              # right-hand side of the per-step inequality
    linear_term: float        # eta * ||grad||^2
    quadratic_term: float     # (K/2) eta^2 (||grad||^2 + trH / N)
    guaranteed_decrease: float  # ||grad||^4 / (2K (||grad||^2 + trH/N))
    exact: bool

    @property
    def violated(self) -> bool:
        return self.expected_next_loss - self.ci_halfwidth > self.bound + BOUND_ATOL

    @property
    def quadratic_dominates(self) -> bool:
        return self.quadratic_term > self.linear_term

    @property
    def decrease_shortfall(self) -> bool:
        """Realized expected decrease below the decrement promised at the optimal rate."""
        realized = self.loss - self.expected_next_loss
        return realized + self.ci_halfwidth + BOUND_ATOL < self.guaranteed_decrease


@dataclass
class DescentReport:
    checks: list[DescentCheck]

    @property
    def violations(self) -> list[DescentCheck]:
        return [c for c in self.checks if c.violated]

    @property
    def shortfalls(self) -> list[DescentCheck]:
        return [c for c in self.checks if c.decrease_shortfall]

    @property
    def quadratic_dominated_steps(self) -> list[int]:
        return [c.step for c in self.checks if c.quadratic_dominates]


def _expected_next_loss(task: TaskSpec, params: PolicyParams, method: AdvantageMethod,
                        n: int, g: int, eta: float, rng_seed: tuple) -> tuple[float, float, bool]:
    opt = optimal_value(task)
    if n * g <= ENUMERATION_LIMIT:
        try:
            w, est = oracle.batch_estimates(task, params, method, n, g)
        except ValueError:
            pass
        else:
            losses = opt - oracle.expected_reward_many(task, params.theta + eta * est)
            return float(w @ losses), 0.0, True
    rng = np.random.default_rng(list(rng_seed))
    losses = np.empty(MC_REPLICATES)
    for k in range(MC_REPLICATES):
        batch = sample_batch(params, task, n, g, rng)
        ghat = estimate_gradient(batch, method, task, params).vector
        losses[k] = opt - oracle.expected_reward_many(task, params.theta + eta * ghat)[0]
    half = Z_99 * losses.std(ddof=1) / math.sqrt(MC_REPLICATES)
    return float(losses.mean()), float(half), False


def verify_descent_bound(record: RunRecord,
                         consts: Optional[oracle.Constants] = None) -> DescentReport:
    """Check the one-step expected loss bound at every recorded step.

    Needs the stored parameter trajectory and a step size that does not
    depend on the sampled batch (fixed or exact-adaptive).
    """
    config = record.config
    if record.trajectory is None or len(record.trajectory) != len(record.rows) + 1:
        raise ValueError("descent check needs a run recorded with keep_trajectory=True")
    if config.lr.mode is LrMode.ADAPTIVE_EMPIRICAL:
        raise ValueError("descent check needs a batch-independent step size")
    task, method = config.task, config.algorithm
    consts = consts or oracle.constants(task)
    k = consts.smoothness
    checks = []
    for t, row in enumerate(record.rows):
        params = PolicyParams(record.trajectory[t], task.outputs_per_query)
        grad = oracle.exact_grad(task, params)
        g2 = float(grad @ grad)
        tr_h = oracle.trace_H(task, params, oracle.reference_baseline(task, params, method))
        eta = row["eta"]
        loss = oracle.exact_loss(task, params)
        noise = g2 + tr_h / config.n
        lin = eta * g2
        quad = 0.5 * k * eta ** 2 * noise
        decrement = g2 ** 2 / (2 * k * noise) if noise > 0 else 0.0
        nxt, half, exact = _expected_next_loss(task, params, method, config.n, config.g,
                                               eta, (config.seed, t, 1))
        checks.append(DescentCheck(t, eta, loss, nxt, half, loss - lin + quad,
                                   lin, quad, decrement, exact))
    return DescentReport(checks)
