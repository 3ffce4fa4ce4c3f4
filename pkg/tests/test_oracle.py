import math

import numpy as np
import pytest
from hypothesis import given, settings

from oblrlab import oracle
from oblrlab.estimators import AdvantageMethod, Algorithm
from oblrlab.policy import PolicyParams, probs, score
from oblrlab.task import make_table_task

from conftest import instance, seeds

TILTED = PolicyParams(np.array([math.log(3), 0.0]), (2,))


def brute_force_H_C(task, params, b):
    """Direct sums over (q, o) pairs, written independently of the library."""
    d = params.dim
    grad = np.zeros(d)
    second = np.zeros((d, d))
    mm = np.zeros((d, d))
    for q, w in enumerate(task.query_probs):
        p = probs(params, q)
        m = np.zeros(d)
        for o, po in enumerate(p):
            v = score(params, q, o) * (task.rewards[q][o] - b[q])
            grad += w * po * v
            second += w * po * np.outer(v, v)
            m += po * v
        mm += w * np.outer(m, m)
    gg = np.outer(grad, grad)
    return grad, second - gg, mm - gg


def test_t1_values(t1):
    zero = PolicyParams.zeros(t1)
    assert oracle.exact_grad(t1, zero).tolist() == [-0.25, 0.25]
    assert oracle.exact_loss(t1, zero) == 0.5
    H, tr = oracle.exact_H(t1, zero, [0.5])
    assert tr == 0.0 and np.all(np.abs(H) < 1e-15)
    assert oracle.trace_H(t1, zero, [0.0]) == pytest.approx(0.125, abs=1e-15)
    C, tr_c = oracle.exact_C(t1, zero, [0.0])
    assert np.all(np.abs(C) < 1e-15)


def test_t2_values(t2):
    zero = PolicyParams.zeros(t2)
    assert oracle.trace_H(t2, zero, [0.0, 0.0]) == pytest.approx(0.1875, abs=1e-15)
    assert oracle.trace_C(t2, zero, [0.0, 0.0]) == pytest.approx(0.0625, abs=1e-15)
    assert oracle.exact_var_estimator(t2, zero, [0.0, 0.0], 1, 2) == pytest.approx(0.125, abs=1e-15)
    g1 = oracle.exact_var_estimator(t2, zero, [0.0, 0.0], 1, 1)
    assert g1 == pytest.approx(0.1875, abs=1e-15)
    assert oracle.exact_var_estimator(t2, zero, [0.0, 0.0], 2, 1) == pytest.approx(g1 / 2)


def test_variance_enumeration_on_t2(t2):
    zero = PolicyParams.zeros(t2)
    m = oracle.estimator_moments(t2, zero, AdvantageMethod.fixed([0.0, 0.0]), 1, 2, literal=True)
    assert m.trace == pytest.approx(0.125, abs=1e-14)


def test_optimal_baseline_examples(t1):
    assert oracle.optimal_baseline(t1, PolicyParams.zeros(t1))[0] == pytest.approx(0.5, abs=1e-15)
    assert oracle.optimal_baseline(t1, TILTED)[0] == pytest.approx(0.75, abs=1e-12)
    assert oracle.mean_baseline(t1, TILTED)[0] == pytest.approx(0.25, abs=1e-15)
    const = make_table_task([0.5, 0.5], [[0.3, 0.3], [0.3, 0.3, 0.3]])
    params = PolicyParams(np.array([1.0, 0.0, 0.5, -1.0, 2.0]), (2, 3))
    assert np.allclose(oracle.optimal_baseline(const, params), 0.3, atol=1e-15)
    assert np.allclose(oracle.exact_grad(const, params), 0.0, atol=1e-15)


def test_single_output_query_baseline_fallback():
    task = make_table_task([0.5, 0.5], [[0.8], [0.0, 1.0]])
    params = PolicyParams(np.array([0.0, 0.3, 0.0]), (1, 2))
    assert oracle.optimal_baseline(task, params)[0] == pytest.approx(0.8)


def test_snr_examples(t1):
    zero = PolicyParams.zeros(t1)
    assert oracle.exact_snr(t1, zero, [0.0]) == pytest.approx(1.0, abs=1e-14)
    assert oracle.exact_snr(t1, zero, [0.5]) == math.inf
    scaled = make_table_task([1.0], [[0.0, 3.0]])
    assert oracle.exact_snr(scaled, TILTED, [0.6]) == pytest.approx(
        oracle.exact_snr(t1, TILTED, [0.2]), rel=1e-12)


def test_constants(t1, t2):
    assert tuple(oracle.constants(t1)) == (1.0, 1.0, 4.0)
    assert tuple(oracle.constants(t2)) == (1.0, 1.0, 8.0)
    assert oracle.constants(t1).smoothness == 5.0


@settings(max_examples=60)
@given(seeds)
def test_matrices_match_brute_force(seed):
    task, params = instance(seed)
    b = np.random.default_rng(seed).uniform(-1, 1, task.num_queries)
    grad, H, C = brute_force_H_C(task, params, b)
    assert np.allclose(oracle.exact_grad(task, params), grad, atol=1e-13)
    H_lib, tr_h = oracle.exact_H(task, params, b, matrices=True)
    C_lib, tr_c = oracle.exact_C(task, params, b, matrices=True)
    assert np.allclose(H_lib, H, atol=1e-13) and np.allclose(C_lib, C, atol=1e-13)
    assert tr_h == pytest.approx(np.trace(H), abs=1e-13)
    assert tr_c == pytest.approx(np.trace(C), abs=1e-13)
    assert np.allclose(C_lib, C_lib.T, atol=1e-15)
    if task.num_queries == 1:
        assert np.allclose(C_lib, 0.0, atol=1e-13)


@given(seeds)
def test_grad_finite_difference(seed):
    task, params = instance(seed)
    h = 1e-5
    fd = np.array([(oracle.expected_reward(task, PolicyParams(params.theta + h * e, params.sizes))
                    - oracle.expected_reward(task, PolicyParams(params.theta - h * e, params.sizes)))
                   / (2 * h) for e in np.eye(params.dim)])
    assert np.max(np.abs(fd - oracle.exact_grad(task, params))) < 1e-6


@given(seeds)
def test_b_star_beats_mean_and_leaves_C_alone(seed):
    task, params = instance(seed)
    b_star = oracle.optimal_baseline(task, params)
    mean = oracle.mean_baseline(task, params)
    assert oracle.trace_H(task, params, b_star) <= oracle.trace_H(task, params, mean) + 1e-15
    assert oracle.trace_C(task, params, b_star) == pytest.approx(
        oracle.trace_C(task, params, mean), abs=1e-13)


@given(seeds)
def test_trace_bounds(seed):
    task, params = instance(seed, logit_scale=3.0)
    c = oracle.constants(task)
    b = np.random.default_rng(seed).uniform(-c.B, c.B, task.num_queries)
    tr_h = oracle.trace_H(task, params, b)
    assert tr_h <= 4 * c.B ** 2 * c.M
    assert oracle.trace_C(task, params, b) <= tr_h + 1e-12


def test_expected_reward_many_matches_single(t2):
    thetas = np.random.default_rng(0).normal(size=(5, 4))
    got = oracle.expected_reward_many(t2, thetas)
    want = [oracle.expected_reward(t2, PolicyParams(th, (2, 2))) for th in thetas]
    assert np.allclose(got, want, atol=1e-15)


def test_literal_and_grouped_moments_agree(t2):
    params = PolicyParams(np.array([0.2, -0.5, 0.9, 0.0]), (2, 2))
    for tag in (Algorithm.OBLR, Algorithm.GRPO, Algorithm.REMAX):
        lit = oracle.estimator_moments(t2, params, AdvantageMethod(tag), 2, 2, literal=True)
        grp = oracle.estimator_moments(t2, params, AdvantageMethod(tag), 2, 2)
        assert np.allclose(lit.mean, grp.mean, atol=1e-14)
        assert np.allclose(lit.cov, grp.cov, atol=1e-14)
        assert oracle.estimator_variance(t2, params, AdvantageMethod(tag), 2, 2) == pytest.approx(
            grp.trace, abs=1e-14)


def test_enumeration_limit(t2):
    with pytest.raises(ValueError, match="exceed"):
        oracle.batch_estimates(t2, PolicyParams.zeros(t2), AdvantageMethod(Algorithm.MEAN), 6, 4,
                               max_outcomes=1000)


def test_reference_baselines(t1):
    assert oracle.reference_baseline(t1, TILTED, AdvantageMethod(Algorithm.OBLR))[0] == pytest.approx(0.75)
    assert oracle.reference_baseline(t1, TILTED, AdvantageMethod(Algorithm.REMAX))[0] == 0.0
    assert oracle.reference_baseline(t1, TILTED, AdvantageMethod(Algorithm.RLOO))[0] == pytest.approx(0.25)


@given(seeds)
def test_trace_H_many_matches_single(seed):
    task, params = instance(seed)
    bs = np.random.default_rng(seed).uniform(-1, 1, (6, task.num_queries))
    got = oracle.trace_H_many(task, params, bs)
    assert np.allclose(got, [oracle.trace_H(task, params, b) for b in bs], atol=1e-14)
