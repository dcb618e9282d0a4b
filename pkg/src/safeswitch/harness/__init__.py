"""Configuration, scenarios, Monte Carlo runner, charts and the command line."""
from .config import ExperimentConfig, load_config, parse_config
from .runner import OutputBundle, run_experiment
from .scenarios import Scenario, generate_scenario

__all__ = ["ExperimentConfig", "OutputBundle", "Scenario", "generate_scenario", "load_config",
           "parse_config", "run_experiment"]
