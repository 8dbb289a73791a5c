"""Federated learning simulator for durable backdoor attacks.

The masked attacker skips the coordinates that benign clients update most,
so later benign rounds are less likely to overwrite the backdoor.
"""
from .analysis import HessianConfig, HessianReport, lifespan, power_iter_top_eig, hutchinson_trace, stability_report
from .attack import AttackConfig, AttackPlan, attacker_local_update, baseline_local_update, top_k_mask
from .experiment import ConfigError, ExperimentConfig, ExperimentLog, TaskConfig, build_task, run_experiment
from .nn import Model, TrainConfig
from .server import DefenseConfig, NumericalError, run_round

__all__ = [
    "AttackConfig",
    "AttackPlan",
    "ConfigError",
    "DefenseConfig",
    "ExperimentConfig",
    "ExperimentLog",
    "HessianConfig",
    "HessianReport",
    "Model",
    "NumericalError",
    "TaskConfig",
    "TrainConfig",
    "attacker_local_update",
    "baseline_local_update",
    "build_task",
    "hutchinson_trace",
    "lifespan",
    "power_iter_top_eig",
    "run_experiment",
    "run_round",
    "stability_report",
    "top_k_mask",
]
