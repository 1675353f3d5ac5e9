"""Distributed continual learning simulator: agents learn task streams and share
data, model parameters or modules over a communication graph under float budgets."""
from .agent import AgentState, NetConfig, TrainConfig
from .budget import CostLedger, marginal_gain_fit, value_of_budget
from .orchestrator import ExperimentConfig, RunRecord, Simulation, relative_gain, run_experiment
from .topology import Topology, make_topology

__all__ = [
    "AgentState", "CostLedger", "ExperimentConfig", "NetConfig", "RunRecord", "Simulation", "Topology",
    "TrainConfig", "make_topology", "marginal_gain_fit", "relative_gain", "run_experiment", "value_of_budget",
]
__version__ = "0.1.0"
