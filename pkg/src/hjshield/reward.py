"""Per-step supervisor rewards: HJ safety-value shaped and the distance ablation.

Branch precedence (the published tables can overlap):
collision > task finished > danger > wrong interrupt > zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RewardConfig:
    k: float = 10.0
    safe_threshold: float = 1.0
    danger_threshold: float = 0.0
    wrong_interrupt_penalty: float = -5.0
    collision_penalty: float = -300.0
    success_bonus: float = 300.0
    d: float = 0.35
    kind: str = "hj"

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.kind not in ("hj", "distance"):
            raise ValueError(f"unknown reward kind {self.kind!r}")


@dataclass(frozen=True)
class StepOutcome:
    collided: bool = False
    finished: bool = False
    min_value: float = float("inf")
    action: int = 0
    min_distance: float = float("inf")

    def __post_init__(self):
        if self.collided and self.finished:
            raise ValueError("a step cannot both collide and finish")
        if self.action not in (0, 1, 2):
            raise ValueError(f"action must be 0, 1 or 2, got {self.action}")


# Which row produced the reward; training logs count these.
COLLISION, SUCCESS, DANGER, WRONG_INTERRUPT, NEUTRAL = (
    "collision", "success", "danger", "wrong_interrupt", "neutral",
)


def hj_reward_branch(outcome: StepOutcome, cfg: RewardConfig) -> tuple[float, str]:
    if outcome.collided:
        return cfg.collision_penalty, COLLISION
    if outcome.finished:
        return cfg.success_bonus, SUCCESS
    if outcome.min_value <= cfg.danger_threshold:
        return cfg.k * outcome.min_value, DANGER
    if outcome.min_value >= cfg.safe_threshold and outcome.action != 0:
        return cfg.wrong_interrupt_penalty, WRONG_INTERRUPT
    return 0.0, NEUTRAL


def hj_reward(outcome: StepOutcome, cfg: RewardConfig) -> float:
    return hj_reward_branch(outcome, cfg)[0]


def distance_reward_branch(outcome: StepOutcome, cfg: RewardConfig) -> tuple[float, str]:
    """Same rows with the minimum Euclidean distance standing in for the value.

    Safe when every distance is at least ``safe_threshold`` (1 m); danger when
    the closest agent is within the collision radius ``d``.
    """
    if outcome.collided:
        return cfg.collision_penalty, COLLISION
    if outcome.finished:
        return cfg.success_bonus, SUCCESS
    if outcome.min_distance <= cfg.d:
        return cfg.k * (outcome.min_distance - cfg.d), DANGER
    if outcome.min_distance >= cfg.safe_threshold and outcome.action != 0:
        return cfg.wrong_interrupt_penalty, WRONG_INTERRUPT
    return 0.0, NEUTRAL


def distance_reward(outcome: StepOutcome, cfg: RewardConfig, distances=None) -> float:
    if distances is not None:
        dist = np.asarray(distances, dtype=float)
        md = float(dist.min()) if dist.size else float("inf")
        outcome = StepOutcome(outcome.collided, outcome.finished, outcome.min_value,
                              outcome.action, md)
    return distance_reward_branch(outcome, cfg)[0]


def reward_branch(outcome: StepOutcome, cfg: RewardConfig) -> tuple[float, str]:
    if cfg.kind == "distance":
        return distance_reward_branch(outcome, cfg)
    return hj_reward_branch(outcome, cfg)
