"""Score-function policy gradients with exact variance oracles on tabular softmax tasks."""

from .estimators import AdvantageMethod, Algorithm, UnsupportedGroupSize, estimate_gradient
from .policy import PolicyParams, sample_batch
from .schedule import LrMode, LrPolicy, allocate_budget
from .task import TaskSpec, make_random_task, make_table_task
from .trainer import RunConfig, run

__version__ = "0.1.0"

__all__ = ["AdvantageMethod", "Algorithm", "LrMode", "LrPolicy", "PolicyParams", "RunConfig",
           "TaskSpec", "UnsupportedGroupSize", "allocate_budget", "estimate_gradient",
           "make_random_task", "make_table_task", "run", "sample_batch"]
