"""
Transition storage: the replay buffer D and the on-policy batch B
"""
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from .distributions import ActionBounds, untransform_action


class TransitionBatch(NamedTuple):
    """Column arrays of n transitions; ``xs`` are unit-interval actions"""

    states: np.ndarray
    xs: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def subset(self, indices) -> "TransitionBatch":
        return TransitionBatch(*(column[indices] for column in self))


class ReplayBuffer:
    """
    Ring buffer of raw transitions with uniform sampling

    Observations and rewards are stored as the environment produced them and
    actions in environment units; ``sample`` maps actions back to the unit
    interval with the buffer's bounds.
    """

    def __init__(self, obs_dim: int, bounds: ActionBounds, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError(f"Capacity must be positive, got {capacity}")
        self.obs_dim = obs_dim
        self.bounds = bounds
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, bounds.dim))
        self.rewards = np.zeros(self.capacity)
        self.next_states = np.zeros((self.capacity, obs_dim))
        self.terminals = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, reward: float, next_state, terminal: bool) -> None:
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminals[i] = float(terminal)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def get(self, indices) -> TransitionBatch:
        indices = np.asarray(indices, dtype=np.int64)
        return TransitionBatch(
            self.states[indices].copy(),
            untransform_action(self.actions[indices], self.bounds),
            self.rewards[indices].copy(),
            self.next_states[indices].copy(),
            self.terminals[indices].copy(),
        )

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("Cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        """Draw n transitions uniformly with replacement"""
        return self.get(self.sample_indices(n, rng))

    def save(self, path: Union[str, Path], limit: Optional[int] = None) -> Path:
        """Write the most recent ``limit`` transitions (all by default) to an ``.npz`` file"""
        n = self.size if limit is None else min(limit, self.size)
        order = (self.cursor - 1 - np.arange(n)) % self.capacity if self.size else np.zeros(0, dtype=np.int64)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            states=self.states[order],
            actions=self.actions[order],
            rewards=self.rewards[order],
            next_states=self.next_states[order],
            terminals=self.terminals[order],
        )
        return path


class OnPolicyBatch:
    """
    Ordered transitions of the current cycle

    Observations are stored normalized exactly as the policy saw them while
    acting, alongside the log-likelihood of the unit-interval action under the
    acting policy. Rewards stay raw; scaling happens when they are consumed.
    """

    FIELDS = ("states", "xs", "log_probs", "rewards", "next_states", "terminals", "truncated")

    def __init__(self):
        self._columns: Dict[str, List] = {name: [] for name in self.FIELDS}

    def __len__(self) -> int:
        return len(self._columns["rewards"])

    def add(self, state, x, log_prob: float, reward: float, next_state, terminal: bool, truncated: bool) -> None:
        values = (state, x, log_prob, reward, next_state, float(terminal), float(truncated))
        for name, value in zip(self.FIELDS, values):
            self._columns[name].append(np.array(value, dtype=np.float64))

    def clear(self) -> None:
        for column in self._columns.values():
            column.clear()

    def arrays(self) -> Dict[str, np.ndarray]:
        if not len(self):
            raise ValueError("On-policy batch is empty")
        return {name: np.stack(column) for name, column in self._columns.items()}

    def transitions(self) -> TransitionBatch:
        data = self.arrays()
        return TransitionBatch(data["states"], data["xs"], data["rewards"], data["next_states"], data["terminals"])

    def segments(self) -> List[Tuple[int, int]]:
        """[start, end) ranges split after every terminal or truncated step"""
        data = self.arrays()
        ends = np.flatnonzero((data["terminals"] > 0) | (data["truncated"] > 0)) + 1
        bounds = [0, *ends.tolist()]
        if bounds[-1] != len(self):
            bounds.append(len(self))
        return list(zip(bounds[:-1], bounds[1:]))

    def save(self, path: Union[str, Path], **extra: np.ndarray) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, **self.arrays(), **extra)
        return path
