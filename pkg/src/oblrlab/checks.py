"""Named invariant checks run by ``oblrlab oracle-check``.

Each check draws its own instances from a seeded generator and returns a
:class:`CheckResult`; a failing result carries the offending inputs so they
can be serialized for a bug report.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import estimators, oracle
from .estimators import AdvantageMethod, Algorithm
from .policy import PolicyParams, log_prob, score
from .schedule import (LrPolicy, allocate_budget, bound_objective, optimal_lr_exact,
                       step_bound_quadratic)
from .task import TaskSpec, make_table_task
from .trainer import RunConfig, run, verify_descent_bound

T1 = make_table_task([1.0], [[0.0, 1.0]])
T2 = make_table_task([0.5, 0.5], [[0.0, 1.0], [0.0, 1.0]])

UNBIASED_METHODS = (Algorithm.MEAN, Algorithm.RLOO, Algorithm.REMAX, Algorithm.OBLR)


@dataclass
class CheckConfig:
    instances: int = 20
    seed: int = 0
    max_cells: int = 12


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    counterexample: dict = field(default_factory=dict)


def random_instance(rng: np.random.Generator, max_cells: int = 12,
                    reward_bound: float = 1.0, logit_scale: float = 1.5):
    """Ragged task with ``|Q| * max|O_q| <= max_cells`` and random logits."""
    nq = int(rng.integers(1, min(3, max_cells) + 1))
    top = max(1, max_cells // nq)
    sizes = [int(rng.integers(1, top + 1)) for _ in range(nq)]
    sizes[int(rng.integers(nq))] = max(2, sizes[0]) if top >= 2 else 1
    sizes = [min(s, top) for s in sizes]
    probs = rng.dirichlet(np.ones(nq))
    bound = reward_bound * float(rng.uniform(0.5, 1.0))
    rewards = [rng.uniform(-bound, bound, s) for s in sizes]
    task = TaskSpec(probs / probs.sum(), tuple(rewards), reward_bound)
    params = PolicyParams(rng.normal(0.0, logit_scale, task.dim), task.outputs_per_query)
    return task, params


def _instance_doc(task: TaskSpec, params: PolicyParams, **extra) -> dict:
    return {"task": task.to_dict(), "params": params.to_dict(), **extra}


def _finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       h: float = 1e-5) -> np.ndarray:
    out = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def check_score_finite_diff(cfg: CheckConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed)
    worst = 0.0
    for _ in range(cfg.instances):
        task, params = random_instance(rng, cfg.max_cells)
        q = int(rng.integers(task.num_queries))
        o = int(rng.integers(task.outputs_per_query[q]))
        fd = _finite_difference(
            lambda th: log_prob(PolicyParams(th, params.sizes), q, o), params.theta)
        err = float(np.max(np.abs(fd - score(params, q, o))))
        worst = max(worst, err)
        if err > 1e-6:
            return CheckResult("score-finite-diff", False, f"error {err:.3g}",
                               _instance_doc(task, params, q=q, o=o))
    return CheckResult("score-finite-diff", True, f"max error {worst:.2e}")


def check_grad_finite_diff(cfg: CheckConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 1)
    worst = 0.0
    for _ in range(cfg.instances):
        task, params = random_instance(rng, cfg.max_cells)
        fd = _finite_difference(
            lambda th: oracle.expected_reward(task, PolicyParams(th, params.sizes)), params.theta)
        err = float(np.max(np.abs(fd - oracle.exact_grad(task, params))))
        worst = max(worst, err)
        if err > 1e-6:
            return CheckResult("grad-finite-diff", False, f"error {err:.3g}",
                               _instance_doc(task, params))
    return CheckResult("grad-finite-diff", True, f"max error {worst:.2e}")


def check_unbiased(cfg: CheckConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 2)
    worst = 0.0
    for _ in range(cfg.instances):
        task, params = random_instance(rng, cfg.max_cells)
        truth = oracle.exact_grad(task, params)
        for tag, g in itertools.product(UNBIASED_METHODS, (2, 3)):
            method = AdvantageMethod(tag)
            mean = oracle.estimator_moments(task, params, method, 1, g).mean
            err = float(np.max(np.abs(mean - truth)))
            worst = max(worst, err)
            if err > 1e-10:
                return CheckResult("estimator-unbiased", False,
                                   f"{tag.value} G={g}: error {err:.3g}",
                                   _instance_doc(task, params, algorithm=tag.value, G=g))
    return CheckResult("estimator-unbiased", True,
                       f"max error {worst:.2e} (GRPO excluded: std normalization)")


def check_variance(cfg: CheckConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 3)
    shapes = [(1, 1), (1, 2), (1, 3), (2, 1), (2, 2), (3, 2), (2, 3), (1, 6)]
    worst = 0.0
    for _ in range(cfg.instances):
        task, params = random_instance(rng, cfg.max_cells)
        n, g = shapes[int(rng.integers(len(shapes)))]
        outcomes = sum(k ** g for k in task.outputs_per_query) ** n
        if outcomes > 500_000:
            n, g = 1, 2
        for b in (np.zeros(task.num_queries), oracle.optimal_baseline(task, params),
                  oracle.mean_baseline(task, params)):
            got = oracle.estimator_moments(task, params, AdvantageMethod.fixed(b), n, g,
                                           literal=True).trace
            want = oracle.exact_var_estimator(task, params, b, n, g)
            err = abs(got - want)
            worst = max(worst, err)
            if err > 1e-10:
                return CheckResult("variance-decomposition", False,
                                   f"N={n} G={g}: enumerated {got!r} vs formula {want!r}",
                                   _instance_doc(task, params, baseline=b.tolist(), N=n, G=g))
    return CheckResult("variance-decomposition", True, f"max error {worst:.2e}")


def check_optimal_baseline(cfg: CheckConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 4)
    for _ in range(cfg.instances):
        task, params = random_instance(rng, cfg.max_cells)
        b_star = oracle.optimal_baseline(task, params)
        best = oracle.trace_H(task, params, b_star)
        B = task.reward_bound
        for q in range(task.num_queries):
            p = params.block(q)
            pi = np.exp(p - p.max())
            pi /= pi.sum()
            weight = task.query_probs[q] * float(pi @ (1 - 2 * pi + pi @ pi))
            for b in np.linspace(-2 * B, 2 * B, 101):
                trial = b_star.copy()
                trial[q] = b
                tr = oracle.trace_H(task, params, trial)
                gap = weight * (b - b_star[q]) ** 2
                if tr < best - 1e-12 or abs(tr - best - gap) > 1e-10:
                    return CheckResult("optimal-baseline", False,
                                       f"query {q}, b={b!r}: trH {tr!r} vs optimum {best!r}",
                                       _instance_doc(task, params, q=q, b=float(b)))
        if oracle.trace_H(task, params, oracle.mean_baseline(task, params)) < best - 1e-12:
            return CheckResult("optimal-baseline", False, "mean baseline beats b*",
                               _instance_doc(task, params))
    return CheckResult("optimal-baseline", True, "argmin and vertex identity hold")


def check_baseline_invariance(cfg: CheckConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 5)
    for _ in range(cfg.instances):
        task, params = random_instance(rng, cfg.max_cells)
        means = []
        for b in (np.zeros(task.num_queries), oracle.optimal_baseline(task, params),
                  oracle.mean_baseline(task, params)):
            means.append(oracle.estimator_moments(task, params, AdvantageMethod.fixed(b), 1, 2).mean)
        spread = max(float(np.max(np.abs(m - means[0]))) for m in means)
        if spread > 1e-12:
            return CheckResult("baseline-shift-invariance", False,
                               f"expected gradient moved by {spread:.3g}",
                               _instance_doc(task, params))
        r = rng.uniform(-1, 1, (5, 3))
        w = rng.uniform(0.1, 2.0, (5, 3))
        c = rng.uniform(-1, 1, (5, 1))
        for name, fn in (("rloo", estimators.advantages_rloo),
                         ("group_mean", estimators.advantages_group_mean),
                         ("oblr", lambda x: estimators.advantages_oblr(x, w))):
            if np.max(np.abs(fn(r + c) - fn(r))) > 1e-12:
                return CheckResult("baseline-shift-invariance", False,
                                   f"{name} advantages changed under a reward shift",
                                   {"rewards": r.tolist(), "shift": c.tolist()})
    return CheckResult("baseline-shift-invariance", True, "gradient and advantages invariant")


def check_trace_bounds(cfg: CheckConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 6)
    for _ in range(cfg.instances * 5):
        task, params = random_instance(rng, cfg.max_cells, logit_scale=3.0)
        consts = oracle.constants(task)
        b = rng.uniform(-consts.B, consts.B, task.num_queries)
        tr_h = oracle.trace_H(task, params, b)
        tr_c = oracle.trace_C(task, params, b)
        if tr_h > 4 * consts.B ** 2 * consts.M or tr_c > tr_h + 1e-12:
            return CheckResult("trace-bound", False, f"trH={tr_h!r} trC={tr_c!r}",
                               _instance_doc(task, params, baseline=b.tolist()))
    return CheckResult("trace-bound", True, "trH <= 4 B^2 M and trC <= trH")


def check_smoothness(cfg: CheckConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 7)
    for _ in range(cfg.instances * 5):
        task, params = random_instance(rng, cfg.max_cells)
        other = PolicyParams(params.theta + rng.normal(0, 1.0, params.dim), params.sizes)
        L = oracle.constants(task).L
        q = int(rng.integers(task.num_queries))
        o = int(rng.integers(task.outputs_per_query[q]))
        lhs = np.linalg.norm(score(other, q, o) - score(params, q, o))
        if lhs > L * np.linalg.norm(other.theta - params.theta) + 1e-12:
            return CheckResult("score-smoothness", False, f"Lipschitz ratio exceeded at q={q}",
                               _instance_doc(task, params, q=q, o=o))
    return CheckResult("score-smoothness", True, "score is L-Lipschitz")


def check_lr_argmin(cfg: CheckConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 8)
    consts = oracle.constants(T1)
    k = consts.smoothness
    grid = np.linspace(0.0, 1.0 / k, 1000)
    cell = grid[1] - grid[0]
    for _ in range(cfg.instances * 5):
        g2, tr_h, n = float(rng.uniform(1e-3, 1)), float(rng.uniform(0, 2)), int(rng.integers(1, 64))
        eta = optimal_lr_exact(g2, tr_h, n, *consts)
        best = grid[np.argmin(step_bound_quadratic(grid, g2, tr_h, n, k))]
        if abs(eta - best) > cell:
            return CheckResult("lr-argmin", False, f"closed form {eta!r} vs grid {best!r}",
                               {"grad_sq": g2, "tr_H": tr_h, "N": n})
    return CheckResult("lr-argmin", True, "closed form within one grid cell")


def check_descent(cfg: CheckConfig) -> CheckResult:
    for name, task in (("T1", T1), ("T2", T2)):
        config = RunConfig(task, AdvantageMethod(Algorithm.MEAN), LrPolicy("adaptive_exact"),
                           steps=50, n=1, g=2, seed=cfg.seed, keep_trajectory=True)
        report = verify_descent_bound(run(config))
        if report.violations:
            bad = report.violations[0]
            return CheckResult("descent-bound", False, f"{name} step {bad.step} violated",
                               {"task": task.to_dict(), "step": bad.step})
    return CheckResult("descent-bound", True, "no violations on T1, T2")


def check_allocation(cfg: CheckConfig) -> CheckResult:
    plan = allocate_budget([4.0, 1.0], [1.0, 1.0], 10)
    if plan.counts.tolist() != [6, 4] or plan.residual > 1e-9:
        return CheckResult("budget-allocation", False, f"example gave {plan.counts.tolist()}",
                           {"tr_H": [4, 1], "grad_sq": [1, 1], "budget": 10})
    rng = np.random.default_rng(cfg.seed + 9)
    for _ in range(cfg.instances):
        h = rng.uniform(0.05, 3.0, 3)
        g2 = rng.uniform(0.05, 2.0, 3)
        budget = int(rng.integers(3, 13))
        plan = allocate_budget(h, g2, budget)
        got = bound_objective(plan.counts, h, g2)
        for a in range(1, budget - 1):
            for b in range(1, budget - a):
                alt = bound_objective([a, b, budget - a - b], h, g2)
                if alt < got - 1e-12:
                    return CheckResult("budget-allocation", False,
                                       f"{[a, b, budget - a - b]} beats {plan.counts.tolist()}",
                                       {"tr_H": h.tolist(), "grad_sq": g2.tolist(), "budget": budget})
        if not plan.clamped and plan.residual > 1e-9:
            return CheckResult("budget-allocation", False, f"residual {plan.residual!r}",
                               {"tr_H": h.tolist(), "grad_sq": g2.tolist(), "budget": budget})
    return CheckResult("budget-allocation", True, "matches brute force")


def check_grpo_formula(cfg: CheckConfig) -> CheckResult:
    golden = {(1.0, 0.0, 0.0, 1.0): (1.0, -1.0, -1.0, 1.0),
              (2.0, 0.0): (1.0, -1.0),
              (3.0, 3.0, 3.0): (0.0, 0.0, 0.0)}
    for rewards, want in golden.items():
        got = estimators.advantages_grpo(np.array(rewards))
        if np.max(np.abs(got - np.array(want))) > 1e-12:
            return CheckResult("grpo-formula", False, f"{rewards} -> {got.tolist()}",
                               {"rewards": list(rewards), "expected": list(want)})
    return CheckResult("grpo-formula", True, "golden advantages reproduced")


REGISTRY: dict[str, Callable[[CheckConfig], CheckResult]] = {
    "score-finite-diff": check_score_finite_diff,
    "grad-finite-diff": check_grad_finite_diff,
    "estimator-unbiased": check_unbiased,
    "variance-decomposition": check_variance,
    "optimal-baseline": check_optimal_baseline,
    "baseline-shift-invariance": check_baseline_invariance,
    "trace-bound": check_trace_bounds,
    "score-smoothness": check_smoothness,
    "lr-argmin": check_lr_argmin,
    "descent-bound": check_descent,
    "budget-allocation": check_allocation,
    "grpo-formula": check_grpo_formula,
}

FAULTS = ("grpo-std",)


@contextlib.contextmanager
def injected_fault(name: str | None) -> Iterator[None]:
    """Temporarily corrupt one formula so the harness can prove it notices."""
    if name is None:
        yield
        return
    if name != "grpo-std":
        raise ValueError(f"unknown fault {name!r}; known: {', '.join(FAULTS)}")
    saved = estimators._GRPO_STD_OFFSET
    estimators._GRPO_STD_OFFSET = 0.1
    try:
        yield
    finally:
        estimators._GRPO_STD_OFFSET = saved


def run_checks(cfg: CheckConfig, fault: str | None = None) -> list[CheckResult]:
    with injected_fault(fault):
        return [fn(cfg) for fn in REGISTRY.values()]
