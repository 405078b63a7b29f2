"""Advantage estimation and the critic / clipped-surrogate policy losses."""

from __future__ import annotations

import numpy as np

from ..nn import Tensor, categorical_kl
from ..nn import tensor as T


def gae(rewards, values, gamma: float, lam: float, last_value: float = 0.0) -> np.ndarray:
    """Generalized advantages for one time-ordered trajectory.

    ``values[t]`` is the critic at step t; ``last_value`` bootstraps the step
    after the final one (0 for a true terminal).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have the same length")
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nxt = values[t + 1] if t + 1 < n else last_value
        delta = rewards[t] + gamma * nxt - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def clipped_surrogate(ratio, advantage, eps: float) -> np.ndarray:
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)`` on plain arrays."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - eps, 1 + eps) * advantage)


def td_targets(rewards, dones, next_values, gamma: float) -> np.ndarray:
    return np.asarray(rewards, float) + gamma * (1.0 - np.asarray(dones, float)) * np.asarray(next_values, float)


def critic_loss(values: Tensor, rewards, dones, next_target_values, gamma: float) -> Tensor:
    """Mean squared bootstrap error; ``next_target_values`` come from the target critic."""
    target = td_targets(rewards, dones, next_target_values, gamma)
    diff = values - target
    return (diff * diff).mean()


def policy_loss(log_probs: Tensor, old_log_probs, actions, advantages, eps: float,
                beta: float, entropy_coef: float = 0.0):
    """Negated clipped surrogate with a KL(old || new) penalty.

    ``log_probs`` and ``old_log_probs`` are (B, n_actions) log-probability
    tables. Returns ``(loss, stats)``.
    """
    old = np.asarray(old_log_probs, dtype=float)
    actions = np.asarray(actions, dtype=np.intp)
    adv = np.asarray(advantages, dtype=float)
    rows = np.arange(len(actions))
    ratio = T.exp(T.pick(log_probs, actions) - old[rows, actions])
    surr = T.minimum(ratio * adv, T.clip(ratio, 1 - eps, 1 + eps) * adv)
    kl = categorical_kl(old, log_probs)
    objective = surr - kl * beta
    if entropy_coef:
        ent = -T.tsum(T.exp(log_probs) * log_probs, axis=-1)
        objective = objective + ent * entropy_coef
    loss = -objective.mean()
    stats = {
        "kl": float(kl.data.mean()),
        "clip_frac": float(np.mean(np.abs(ratio.data - 1.0) > eps)),
    }
    return loss, stats
