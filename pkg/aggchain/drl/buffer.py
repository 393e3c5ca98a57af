"""Replay buffer shared by every server's agent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from aggchain.errors import ReplayBufferEmpty

STATE_DIM = 4
ACTION_DIM = 6


@dataclass(frozen=True, eq=False)
class Experience:
    state: npt.NDArray[np.float64]
    action: npt.NDArray[np.float64]
    reward: float
    next_state: npt.NDArray[np.float64]
    server_id: str = ""


@dataclass(frozen=True)
class Batch:
    states: npt.NDArray[np.float64]
    actions: npt.NDArray[np.float64]
    rewards: npt.NDArray[np.float64]
    next_states: npt.NDArray[np.float64]


class SharedReplayBuffer:
    """Fixed-capacity ring; the oldest experience is overwritten first."""

    def __init__(self, capacity: int = 10_000) -> None:
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.states = np.zeros((capacity, STATE_DIM))
        self.actions = np.zeros((capacity, ACTION_DIM))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, STATE_DIM))
        self.owners: list[str] = [""] * capacity
        self.cursor = 0
        self.total = 0

    def __len__(self) -> int:
        return min(self.total, self.capacity)

    def store(self, exp: Experience) -> None:
        if not np.isfinite(exp.reward):
            raise ValueError(f"reward from {exp.server_id or 'agent'} is not finite: {exp.reward}")
        i = self.cursor
        self.states[i] = exp.state
        self.actions[i] = exp.action
        self.rewards[i] = exp.reward
        self.next_states[i] = exp.next_state
        self.owners[i] = exp.server_id
        self.cursor = (i + 1) % self.capacity
        self.total += 1

    def experiences(self) -> list[Experience]:
        """Stored experiences, oldest first."""
        n = len(self)
        start = self.cursor if self.total > self.capacity else 0
        order = [(start + j) % self.capacity for j in range(n)]
        return [
            Experience(
                self.states[i].copy(),
                self.actions[i].copy(),
                float(self.rewards[i]),
                self.next_states[i].copy(),
                self.owners[i],
            )
            for i in order
        ]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        n = len(self)
        if n == 0:
            raise ReplayBufferEmpty("cannot sample from an empty replay buffer")
        idx = rng.choice(n, size=batch_size, replace=batch_size > n)
        return Batch(
            self.states[idx].copy(),
            self.actions[idx].copy(),
            self.rewards[idx].copy(),
            self.next_states[idx].copy(),
        )
