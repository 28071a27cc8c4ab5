"""Experiment runners, replication formulas, reports and the CLI."""

from .config import ExperimentConfig, config_from_mapping
from .experiments import (
    expected_inverse_price, run_arbitrage, run_counterexample, run_experiment, run_max_closure,
    run_oracle, run_simulate,
)
from .replication import (
    arbitrage_strategy, bond_replication_value, hedge_gamma, hedge_ratio, threshold_horizon,
    threshold_mass,
)
from .report import SCHEMA, ExperimentReport, Quantity

__all__ = [
    "ExperimentConfig", "config_from_mapping", "expected_inverse_price", "run_arbitrage",
    "run_counterexample", "run_experiment", "run_max_closure", "run_oracle", "run_simulate",
    "arbitrage_strategy", "bond_replication_value", "hedge_gamma", "hedge_ratio",
    "threshold_horizon", "threshold_mass", "SCHEMA", "ExperimentReport", "Quantity",
]
