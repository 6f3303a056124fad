"""Hierarchical federated learning with training-time and inference-time
attacks and defenses, in plain numpy."""

from .config import ConfigError, RunConfig, load_config, parse_config
from .hfl import AggregationSchedule, AttackHooks, SelectionPolicy, run_hfl
from .metrics import MetricsReport, misclassification_rate, tasr
from .runner import SweepSpec, run_scenario, run_sweep
from .topology import HflTree, NodeId, TopologyConfig, build_tree

__version__ = "0.1.0"

__all__ = [
    "AggregationSchedule",
    "AttackHooks",
    "ConfigError",
    "HflTree",
    "MetricsReport",
    "NodeId",
    "RunConfig",
    "SelectionPolicy",
    "SweepSpec",
    "TopologyConfig",
    "build_tree",
    "load_config",
    "misclassification_rate",
    "parse_config",
    "run_hfl",
    "run_scenario",
    "run_sweep",
    "tasr",
]
