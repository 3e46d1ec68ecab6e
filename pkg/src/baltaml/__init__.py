"""Bayesian task-adaptive meta-learning for imbalanced few-shot episodes."""

from .episodes import Episode, EpisodeDistribution, sample_episode, synth_task_family
from .setenc import encode_episode, init_encoder
from .taml import VariantConfig, inner_adapt, meta_objective, predict
from .taskmodel import MetaParams, init_params
from .trainer import TrainConfig, evaluate, load_checkpoint, meta_train, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Episode",
    "EpisodeDistribution",
    "sample_episode",
    "synth_task_family",
    "encode_episode",
    "init_encoder",
    "VariantConfig",
    "inner_adapt",
    "meta_objective",
    "predict",
    "MetaParams",
    "init_params",
    "TrainConfig",
    "evaluate",
    "load_checkpoint",
    "meta_train",
    "save_checkpoint",
]
