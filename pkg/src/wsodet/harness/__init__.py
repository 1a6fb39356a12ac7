"""Benchmark generation, training, evaluation, ablation and the CLI."""

from .config import RunConfig
from .synth import SyntheticScene, gen_dataset, gen_features, gen_proposals, prepare_scenes
from .train import NumericalError, train
from .evaluate import evaluate, run_inference

__all__ = [
    "NumericalError",
    "RunConfig",
    "SyntheticScene",
    "evaluate",
    "gen_dataset",
    "gen_features",
    "gen_proposals",
    "prepare_scenes",
    "run_inference",
    "train",
]
