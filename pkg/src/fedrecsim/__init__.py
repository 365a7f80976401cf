"""Simulation of target-item promotion attacks and server-side defenses in federated recommendation."""

from .config import ConfigError, RunConfig, parse_config, serialize_config
from .data import InteractionDataset, build_dataset, load_ratings, synth_dataset
from .models import PublicParams, Recommender, init_public
from .protocol import RoundReport, build_simulation, run_training
from .runner import load_dataset, run_grid, run_one

__version__ = "0.1.0"

__all__ = ["ConfigError", "RunConfig", "parse_config", "serialize_config", "InteractionDataset", "build_dataset",
           "load_ratings", "synth_dataset", "PublicParams", "Recommender", "init_public", "RoundReport",
           "build_simulation", "run_training", "load_dataset", "run_grid", "run_one"]
