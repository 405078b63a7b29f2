"""Per-task transition storage."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class TransitionRecord:
    """One agent step.

    ``frames`` holds H+1 observation frames newest-first, (o_{t+1}, o_t, ...,
    o_{t-H+1}), so the current observation is ``frames[1:]`` and the next one
    ``frames[:-1]``. ``actions`` is (a_t, a_{t-1}, ..., a_{t-H+1}).
    """

    frames: np.ndarray
    actions: np.ndarray
    reward: float
    terminal: bool
    log_prob: float
    advantage: float | None = None

    @property
    def action(self) -> int:
        return int(self.actions[0])


class ReplayBuffer:
    """Bounded FIFO of transitions belonging to a single task."""

    def __init__(self, capacity: int, task: str = ""):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.task = task
        self._items: deque[TransitionRecord] = deque(maxlen=capacity)
        self._arrays = None

    def __len__(self):
        return len(self._items)

    def add(self, rec: TransitionRecord) -> None:
        if rec.advantage is None:
            raise ValueError("transitions need an advantage before entering the buffer")
        self._items.append(rec)
        self._arrays = None

    def extend(self, recs) -> None:
        for r in recs:
            self.add(r)

    def clear(self) -> None:
        self._items.clear()
        self._arrays = None

    def arrays(self) -> dict[str, np.ndarray]:
        if self._arrays is None:
            items = list(self._items)
            self._arrays = {
                "frames": np.stack([r.frames for r in items]),
                "actions": np.stack([r.actions for r in items]).astype(int),
                "rewards": np.array([r.reward for r in items]),
                "terminals": np.array([r.terminal for r in items], dtype=float),
                "log_probs": np.array([r.log_prob for r in items]),
                "advantages": np.array([r.advantage for r in items]),
            }
        return self._arrays

    def sample(self, size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Minibatch without replacement (the whole buffer when it is smaller)."""
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        n = len(self._items)
        idx = rng.choice(n, size=min(size, n), replace=False)
        out = {k: v[idx] for k, v in self.arrays().items()}
        out["task"] = self.task
        return out
