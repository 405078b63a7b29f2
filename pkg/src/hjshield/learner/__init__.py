"""LSTM-VAE encoder, PPO actor-critic and the multi-task training loop."""

from .buffer import ReplayBuffer, TransitionRecord
from .model import N_ACTIONS, NO_NEIGHBOR_TOKEN, PPOConfig, ShieldModel, VAEConfig, prepare_sequences
from .ppo import clipped_surrogate, critic_loss, gae, policy_loss, td_targets
from .train import (
    LOG_FIELDS,
    Trainer,
    TrainConfig,
    TrainingDivergence,
    collect_episode,
    episode_seed,
    load_model,
)

__all__ = [name for name in dir() if not name.startswith("_")]
