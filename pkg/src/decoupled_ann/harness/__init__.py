"""Dataset I/O, exact ground truth, workload driver and command line."""

from .datasets import read_vecs, synthetic_mixture, write_vecs
from .groundtruth import brute_force_knn, recall_at_k
from .workload import ConfigError, DataError, Report, WorkloadConfig, run_workload

__all__ = [
    "ConfigError",
    "DataError",
    "Report",
    "WorkloadConfig",
    "brute_force_knn",
    "read_vecs",
    "recall_at_k",
    "run_workload",
    "synthetic_mixture",
    "write_vecs",
]
