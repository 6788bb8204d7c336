"""Multi-objective portfolio optimisation by gradient descent over simplex weights."""

from .data import ReturnsPanel, SyntheticMarketSpec, load_panel, log_returns, synthesize
from .engine import LossSpec, Term, TrainConfig, compose_loss, grid_search, replication_study, train

__version__ = "0.1.0"

__all__ = [
    "LossSpec", "ReturnsPanel", "SyntheticMarketSpec", "Term", "TrainConfig",
    "compose_loss", "grid_search", "load_panel", "log_returns", "replication_study",
    "synthesize", "train",
]
