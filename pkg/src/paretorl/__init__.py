"""Multi-reward PPO fine-tuning of autoregressive token policies with batch-wise Pareto selection."""

from .pareto import ParetoSet, dominates, hypervolume, non_dominated_set
from .rewards import NormalizerState, RewardConfig, fit_normalizer, normalize
from .trainer import PPOConfig, Trainer

__all__ = ["ParetoSet", "dominates", "hypervolume", "non_dominated_set", "NormalizerState", "RewardConfig",
           "fit_normalizer", "normalize", "PPOConfig", "Trainer"]
__version__ = "0.1.0"
