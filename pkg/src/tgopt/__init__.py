"""Task grouping for multi-task learning.

Predict which tasks benefit from sharing a network and search for the task
partition with the lowest total multi-task loss.
"""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    NormalizationStats,
    SplitSpec,
    Task,
    TaskKind,
    TaskSet,
    TaskSplit,
    augment_to_max,
    load_taskset,
    normalize_features,
    split_task,
    split_taskset,
    synth_taskset,
)
from .errors import TgoptError  # noqa: E402
from .mtl import MtlArch, MtlResult, inter_task_affinity, relative_mtl_gain, train_mtl  # noqa: E402
from .nn import Activation, LossKind, NetSpec, Params, TrainConfig  # noqa: E402
from .partitions import (  # noqa: E402
    Partition,
    bell_number,
    enumerate_partitions,
    mutate_groups,
    sample_uniform_partition,
)
from .search import (  # noqa: E402
    EvalCache,
    MtlTrainer,
    SearchConfig,
    accept_probability,
    evaluate_partition,
    random_search_baseline,
    search_with_predictor,
)
from .stl import StlResult, run_stl  # noqa: E402

__all__ = [
    "Activation", "EvalCache", "LossKind", "MtlArch", "MtlResult", "MtlTrainer", "NetSpec",
    "NormalizationStats", "Params", "Partition", "SearchConfig", "SplitSpec", "StlResult", "Task",
    "TaskKind", "TaskSet", "TaskSplit", "TgoptError", "TrainConfig", "accept_probability",
    "augment_to_max", "bell_number", "enumerate_partitions", "evaluate_partition",
    "inter_task_affinity", "load_taskset", "mutate_groups", "normalize_features",
    "random_search_baseline", "relative_mtl_gain", "run_stl", "sample_uniform_partition",
    "search_with_predictor", "split_task", "split_taskset", "synth_taskset", "train_mtl",
]
