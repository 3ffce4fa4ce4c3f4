import json
import math
from pathlib import Path

import numpy as np
import pytest

from oblrlab import oracle
from oblrlab.estimators import AdvantageMethod, UnsupportedGroupSize
from oblrlab.policy import PolicyParams, batch_rng
from oblrlab.schedule import LrPolicy
from oblrlab.task import make_table_task
from oblrlab.trainer import CSV_COLUMNS, RunConfig, run, step, verify_descent_bound

GOLDEN = Path(__file__).parent / "golden" / "t1_oblr_seed1.csv"


def _config(task, name="oblr", lr=None, **kw):
    return RunConfig(task, AdvantageMethod.parse(name), lr or LrPolicy(), **kw)


def test_golden_reference_run(t1):
    record = run(_config(t1, steps=200, n=4, g=4, seed=1))
    assert record.final_loss < 0.1 * record.rows[0]["loss"]
    golden = np.genfromtxt(GOLDEN, delimiter=",", names=True)
    for name in ("eta", "loss", "grad_norm_emp", "snr_exact"):
        assert np.allclose(record.column(name), golden[name], rtol=1e-9, atol=1e-15, equal_nan=True)


def test_runs_are_deterministic(t2):
    a = run(_config(t2, steps=30, seed=4))
    b = run(_config(t2, steps=30, seed=4))
    assert a.csv_text() == b.csv_text()
    assert np.array_equal(a.final_params.theta, b.final_params.theta)
    assert a.csv_text() != run(_config(t2, steps=30, seed=5)).csv_text()


def test_single_step_run(t1):
    record = run(_config(t1, steps=1))
    assert len(record.rows) == 1
    assert tuple(record.rows[0]) == CSV_COLUMNS


def test_zero_rate_keeps_params():
    # A flat task has zero gradient, so the exact rate is zero.
    task = make_table_task([1.0], [[0.5, 0.5]])
    params = PolicyParams(np.array([0.3, -0.3]), (2,))
    config = _config(task, "rloo", LrPolicy("adaptive_exact"), steps=1, n=2, g=2)
    new, row = step(params, task, config, batch_rng(0, 0), 0)
    assert row["eta"] == 0.0 and new is params


@pytest.mark.parametrize("name", ["mean", "grpo", "rloo", "remax", "oblr", "group_mean"])
def test_constant_task_never_moves(name):
    task = make_table_task([0.5, 0.5], [[0.2, 0.2, 0.2], [0.2, 0.2]])
    record = run(_config(task, name, LrPolicy("fixed", 0.5), steps=20, n=2, g=3,
                         keep_trajectory=True))
    assert all(np.array_equal(th, record.trajectory[0]) for th in record.trajectory)


def test_one_step_decreases_loss(t1):
    config = _config(t1, "oblr", LrPolicy("fixed", 0.5), steps=1, n=1, g=2)
    params = PolicyParams.zeros(t1)
    new, _ = step(params, t1, config, batch_rng(1, 0), 0)
    weights, estimates = oracle.batch_estimates(t1, params, config.algorithm, 1, 2)
    losses = 1.0 - oracle.expected_reward_many(t1, params.theta + 0.5 * estimates)
    moved = np.abs(estimates).sum(axis=1) > 0
    assert np.all(losses[moved] < oracle.exact_loss(t1, params))
    assert weights @ losses < oracle.exact_loss(t1, params)


def test_descent_bound_mean_baseline(t1):
    record = run(_config(t1, "mean", LrPolicy("adaptive_exact"), steps=50, n=1, g=2,
                         keep_trajectory=True))
    report = verify_descent_bound(record)
    assert len(report.checks) == 50 and not report.violations
    assert all(c.exact for c in report.checks)


def test_descent_oversized_rate_flags_quadratic_term(t1):
    eta = 10 * oracle.constants(t1).smoothness ** -1
    record = run(_config(t1, "mean", LrPolicy("fixed", eta), steps=5, n=1, g=2,
                         keep_trajectory=True))
    report = verify_descent_bound(record)
    assert not report.violations
    assert report.quadratic_dominated_steps == list(range(5))


def test_descent_check_requires_trajectory(t1):
    with pytest.raises(ValueError, match="keep_trajectory"):
        verify_descent_bound(run(_config(t1, "mean", LrPolicy("fixed", 0.1), steps=2)))
    with pytest.raises(ValueError, match="batch-independent"):
        verify_descent_bound(run(_config(t1, steps=2, keep_trajectory=True)))


def test_config_validation(t1):
    with pytest.raises(UnsupportedGroupSize):
        _config(t1, "rloo", g=1)
    with pytest.raises(ValueError):
        _config(t1, steps=0)
    with pytest.raises(ValueError):
        _config(t1, "grpo", n=1, g=1)


def test_diagnostic_cadence(t1):
    record = run(_config(t1, steps=6, exact_stats_every=3))
    assert [r["tr_H"] is not None for r in record.rows] == [True, False, False, True, False, False]
    assert ",," in record.csv_text()


def test_save_writes_csv_and_sidecar(t2, tmp_path):
    record = run(_config(t2, steps=5, seed=3))
    record.save(tmp_path)
    side = json.loads((tmp_path / "run.json").read_text())
    assert side["seed"] == 3 and side["constants"] == {"B": 1.0, "L": 1.0, "M": 8.0}
    assert side["final_loss"] == pytest.approx(record.final_loss)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS) and len(lines) == 6


def test_reference_run_loss_falls_monotonically_on_average(t2):
    record = run(_config(t2, "oblr", LrPolicy("adaptive_exact"), steps=100, seed=0))
    loss = record.column("loss")
    assert loss[-10:].mean() < loss[:10].mean()
    assert math.isfinite(record.final_loss)
