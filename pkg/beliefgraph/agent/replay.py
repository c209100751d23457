#!/usr/bin/env python3
"""
Replay module for the belief-graph laboratory.
Handles immutable state snapshots, replay items and the prioritized
replay buffer with its trajectory filter.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from beliefgraph.core.kgraph import BeliefGraph, DiscreteGraph
from beliefgraph.errors import DomainError

logger = logging.getLogger(__name__)

FILTER_MODES = ("step", "episode")
PRIORITY_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class Snapshot:
    """What the action selector sees at one step"""

    obs: Tuple[str, ...]
    candidates: Tuple[Tuple[str, ...], ...]
    graph: Union[BeliefGraph, DiscreteGraph, None] = None

    def __post_init__(self):
        object.__setattr__(self, "obs", tuple(self.obs))
        object.__setattr__(self, "candidates", tuple(tuple(c) for c in self.candidates))


@dataclass(frozen=True)
class ReplayItem:
    state: Snapshot
    action: int
    reward: float
    next_state: Snapshot
    done: bool
    episode: int
    step: int


class PrioritizedReplay:
    """Class for a ring buffer sampled in proportion to priority ** alpha"""

    def __init__(self, capacity: int, alpha: float = 0.6, tolerance: float = 0.1, filter_mode: str = "step"):
        """Initialize the buffer

        Args:
            capacity: Maximum number of items; the oldest are evicted first
            alpha: Priority exponent
            tolerance: Trajectory filter factor
            filter_mode: Average reward per "step" or per "episode" in the filter
        """
        if capacity < 1:
            raise DomainError(f"capacity must be positive, got {capacity}")
        if filter_mode not in FILTER_MODES:
            raise DomainError(f"filter_mode must be one of {FILTER_MODES}, got {filter_mode!r}")
        self.capacity = capacity
        self.alpha = alpha
        self.tolerance = tolerance
        self.filter_mode = filter_mode
        self.items: List[Optional[ReplayItem]] = [None] * capacity
        self.priorities = np.zeros(capacity)
        self._next = 0
        self._size = 0
        self._reward_sum = 0.0
        self._episode_returns: Dict[int, float] = {}
        self._episode_counts: Dict[int, int] = {}

    def __len__(self) -> int:
        return self._size

    def mean_reward(self) -> float:
        """Average reward of the stored items under the filter mode"""
        if self._size == 0:
            return 0.0
        if self.filter_mode == "step":
            return self._reward_sum / self._size
        return sum(self._episode_returns.values()) / len(self._episode_returns)

    def trajectory_score(self, trajectory: Sequence[ReplayItem]) -> float:
        rewards = [item.reward for item in trajectory]
        if self.filter_mode == "step":
            return float(np.mean(rewards))
        return float(np.sum(rewards))

    def push(self, trajectory: Sequence[ReplayItem]) -> bool:
        """Admit a finished trajectory if it beats tolerance x the buffer average

        Returns:
            Whether the trajectory was stored
        """
        if not trajectory:
            return False
        if self._size and not self.trajectory_score(trajectory) > self.tolerance * self.mean_reward():
            logger.debug("filtered trajectory of episode %d", trajectory[0].episode)
            return False
        self.add_trajectory(trajectory)
        return True

    def add_trajectory(self, trajectory: Sequence[ReplayItem]) -> None:
        """Store items unconditionally at the current maximum priority"""
        for item in trajectory:
            self._add(item)

    def _add(self, item: ReplayItem) -> None:
        priority = self.priorities[:self._size].max() if self._size else 1.0
        old = self.items[self._next]
        if old is not None:
            self._forget(old)
        self.items[self._next] = item
        self.priorities[self._next] = priority
        self._reward_sum += item.reward
        self._episode_returns[item.episode] = self._episode_returns.get(item.episode, 0.0) + item.reward
        self._episode_counts[item.episode] = self._episode_counts.get(item.episode, 0) + 1
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _forget(self, item: ReplayItem) -> None:
        self._reward_sum -= item.reward
        self._episode_returns[item.episode] -= item.reward
        self._episode_counts[item.episode] -= 1
        if self._episode_counts[item.episode] == 0:
            del self._episode_returns[item.episode]
            del self._episode_counts[item.episode]

    def probabilities(self) -> np.ndarray:
        scaled = self.priorities[:self._size] ** self.alpha
        return scaled / scaled.sum()

    def sample(self, batch_size: int, rng: np.random.Generator, beta: float = 0.4
               ) -> Tuple[np.ndarray, List[ReplayItem], np.ndarray]:
        """Draw a batch in proportion to priority ** alpha

        Args:
            batch_size: Number of items
            rng: Sampler
            beta: Importance-sampling exponent

        Returns:
            Tuple of (indices, items, importance weights normalized by their max)
        """
        if self._size < batch_size:
            raise DomainError(f"buffer holds {self._size} items, batch needs {batch_size}")
        probs = self.probabilities()
        indices = rng.choice(self._size, size=batch_size, p=probs)
        weights = (self._size * probs[indices]) ** (-beta)
        weights = weights / weights.max()
        return indices, [self.items[i] for i in indices], weights

    def update_priorities(self, indices: Sequence[int], td_errors: Sequence[float]) -> None:
        for index, error in zip(indices, td_errors):
            self.priorities[index] = abs(float(error)) + PRIORITY_EPS

    def sequence(self, index: int, length: int) -> List[ReplayItem]:
        """Up to `length` consecutive items of one episode starting at index"""
        first = self.items[index]
        if first is None:
            raise DomainError(f"no item at index {index}")
        chain = [first]
        position = index
        while len(chain) < length and not chain[-1].done:
            position = (position + 1) % self.capacity
            if position == self._next:
                break
            item = self.items[position]
            if item is None or item.episode != first.episode or item.step != chain[-1].step + 1:
                break
            chain.append(item)
        return chain

    def following(self, index: int, n: int) -> List[ReplayItem]:
        """Items t..t+n-1 for an n-step return, cut at the episode end"""
        return self.sequence(index, n)
