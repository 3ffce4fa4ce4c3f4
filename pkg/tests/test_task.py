import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oblrlab.task import TaskSpec, make_random_task, make_table_task, optimal_value


def test_smallest_random_task():
    task = make_random_task(1, 1, 1.0, seed=5)
    assert task.query_probs.tolist() == [1.0]
    assert task.outputs_per_query == (1,)
    assert -1.0 <= task.rewards[0][0] <= 1.0


def test_random_task_is_deterministic():
    a = make_random_task(2, 3, 2.0, seed=7)
    b = make_random_task(2, 3, 2.0, seed=7)
    assert a.to_dict() == b.to_dict()


def test_random_rewards_within_bound():
    task = make_random_task(4, 5, 1.0, seed=3)
    flat = task.flat_rewards()
    assert flat.size == 20
    assert np.all(np.abs(flat) <= 1.0)


@pytest.mark.parametrize("args", [(0, 2, 1.0), (2, 0, 1.0), (2, 2, 0.0), (2, 2, -1.0)])
def test_random_task_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        make_random_task(*args, seed=0)


def test_table_tasks(t1, t2):
    assert t1.reward_bound == 1.0
    assert t2.reward_bound == 1.0
    assert t2.dim == 4
    assert t2.block(1) == slice(2, 4)


def test_table_task_rejects_bad_distribution():
    with pytest.raises(ValueError):
        make_table_task([0.3, 0.8], [[0.0], [1.0]])


def test_rejects_reward_above_bound_and_empty_query():
    with pytest.raises(ValueError):
        TaskSpec(np.array([1.0]), (np.array([2.0]),), 1.0)
    with pytest.raises(ValueError):
        make_table_task([0.5, 0.5], [[1.0], []])


def test_optimal_value(t1, t2):
    assert optimal_value(t1) == 1.0
    assert optimal_value(t2) == 1.0
    assert optimal_value(make_table_task([0.25, 0.75], [[-0.3, -0.3], [-0.3]])) == pytest.approx(-0.3)


def test_ragged_round_trip(tmp_path):
    task = make_table_task([0.2, 0.8], [[1.0, -2.0, 0.5], [0.25]])
    path = tmp_path / "task.json"
    task.save(path)
    back = TaskSpec.load(path)
    assert back.to_dict() == task.to_dict()
    assert back.outputs_per_query == (3, 1)


def test_from_dict_names_missing_field():
    doc = make_table_task([1.0], [[0.0, 1.0]]).to_dict()
    del doc["rewards"]
    with pytest.raises(ValueError, match="rewards"):
        TaskSpec.from_dict(doc)


@given(st.integers(1, 5), st.integers(1, 5), st.floats(0.1, 10.0), st.integers(0, 10**6))
def test_generator_invariants(nq, no, bound, seed):
    task = make_random_task(nq, no, bound, seed)
    assert abs(task.query_probs.sum() - 1.0) <= 1e-12
    assert np.all(np.abs(task.flat_rewards()) <= bound)
    assert json.loads(json.dumps(task.to_dict())) == task.to_dict()
