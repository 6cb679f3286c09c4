"""
Return and advantage estimators

Arrays follow one convention throughout: a segment of T steps has rewards
r[0..T) and baselines b[0..T), bootstrap values Q[0..T] and terminal flags
d[0..T], where d[t] = 1 means the episode ended before step t. Time-limit
truncation is never a terminal. Rewards, values and baselines may carry extra
trailing axes (one column per critic sample, say); they broadcast against
each other while the flags stay one-dimensional.
"""
from dataclasses import dataclass
from typing import Union

import numpy as np

ArrayLike = Union[float, np.ndarray]


def _expand(flags: np.ndarray, ndim: int) -> np.ndarray:
    return flags.reshape(flags.shape + (1,) * (ndim - 1))


def _check_rate(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


@dataclass
class RolloutArrays:
    """Inputs of the unified advantage estimator for one segment"""

    rewards: np.ndarray
    critic_values: np.ndarray
    baselines: np.ndarray
    dones: np.ndarray
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.critic_values = np.asarray(self.critic_values, dtype=np.float64)
        self.baselines = np.asarray(self.baselines, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=np.float64)
        self.gamma = _check_rate("gamma", self.gamma)
        self.lam = _check_rate("lambda", self.lam)

        T = self.length
        if self.critic_values.shape[:1] != (T + 1,):
            raise ValueError(f"critic_values needs {T + 1} entries along axis 0, got {self.critic_values.shape}")
        if self.baselines.shape[:1] != (T,):
            raise ValueError(f"baselines needs {T} entries along axis 0, got {self.baselines.shape}")
        if self.dones.shape != (T + 1,):
            raise ValueError(f"dones must have shape ({T + 1},), got {self.dones.shape}")
        if np.any((self.dones != 0.0) & (self.dones != 1.0)):
            raise ValueError("dones must contain only 0 and 1")
        try:
            np.broadcast_shapes(self.rewards.shape[1:], self.critic_values.shape[1:], self.baselines.shape[1:])
        except ValueError:
            raise ValueError(
                f"Trailing shapes do not broadcast: rewards {self.rewards.shape}, "
                f"critic_values {self.critic_values.shape}, baselines {self.baselines.shape}"
            )

    @property
    def length(self) -> int:
        if self.rewards.ndim == 0:
            raise ValueError("rewards must have a time axis")
        return self.rewards.shape[0]

    @property
    def output_shape(self):
        trailing = np.broadcast_shapes(self.rewards.shape[1:], self.critic_values.shape[1:], self.baselines.shape[1:])
        return (self.length,) + trailing

    def alive(self) -> np.ndarray:
        """1 - d[t], broadcastable against the value arrays"""
        return _expand(1.0 - self.dones, len(self.output_shape))


def uae(arrays: RolloutArrays) -> np.ndarray:
    """
    Unified advantage estimator by backward recursion

    A_t = delta_t + gamma*lam*(1 - d_{t+1}) * carry, where delta_t = r_t + gamma*Q_{t+1}*(1 - d_{t+1}) - b_t
    and the carry accumulates delta - (Q - b) from later steps.

    Returns:
        np.ndarray: Advantages of shape ``arrays.output_shape``
    """
    r, Q, b = arrays.rewards, arrays.critic_values, arrays.baselines
    alive = arrays.alive()
    gamma, gl = arrays.gamma, arrays.gamma * arrays.lam
    advantages = np.zeros(arrays.output_shape)
    carry = np.zeros(arrays.output_shape[1:])
    for t in reversed(range(arrays.length)):
        mask = alive[t + 1]
        delta = r[t] + gamma * Q[t + 1] * mask - b[t]
        z = Q[t] - b[t]
        advantages[t] = delta + gl * mask * carry
        carry = (delta - z) + gl * mask * carry
    return advantages


def gae(rewards, values, dones, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimation over V[0..T]"""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    if values.shape[:1] != (T + 1,) or dones.shape != (T + 1,):
        raise ValueError(f"Expected {T + 1} values and flags for {T} rewards, got {values.shape} and {dones.shape}")
    gamma, lam = _check_rate("gamma", gamma), _check_rate("lambda", lam)

    shape = np.broadcast_shapes(rewards.shape, (T,) + values.shape[1:])
    alive = _expand(1.0 - dones, len(shape))
    advantages = np.zeros(shape)
    last = np.zeros(shape[1:])
    for t in reversed(range(T)):
        nonterminal = alive[t + 1]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        advantages[t] = last
    return advantages


def _n_step_return(arrays: RolloutArrays, t: int, n: int) -> np.ndarray:
    r, Q = arrays.rewards, arrays.critic_values
    alive = arrays.alive()
    total = np.zeros(arrays.output_shape[1:])
    discount, survive = 1.0, np.ones_like(alive[0])
    for k in range(n):
        total = total + discount * survive * r[t + k]
        survive = survive * alive[t + k + 1]
        discount *= arrays.gamma
    return total + discount * survive * Q[t + n]


def n_step_advantage(arrays: RolloutArrays, n: int, t: int) -> np.ndarray:
    """
    sum_{k<n} gamma^k r_{t+k} + gamma^n Q_{t+n} - b_t, cut off at the first terminal

    Raises:
        ValueError: If n < 1 or the window [t, t+n] leaves the segment
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if t < 0 or t + n > arrays.length:
        raise ValueError(f"Window t={t}, n={n} exceeds segment length {arrays.length}")
    return _n_step_return(arrays, t, n) - arrays.baselines[t]


def lambda_return_q(rewards, critic_values, dones, gamma: float, lam: float) -> np.ndarray:
    """
    Forward-view lambda-return over Q-bootstrapped n-step returns

    G_t = (1 - lam) sum_{n=1}^{T-t-1} lam^(n-1) G_t^(n) + lam^(T-t-1) G_t^(T-t)
    """
    T = np.asarray(rewards).shape[0]
    arrays = RolloutArrays(rewards, critic_values, np.zeros(T), dones, gamma, lam)
    returns = np.zeros(arrays.output_shape)
    for t in range(T):
        horizon = T - t
        weighted = np.zeros(arrays.output_shape[1:])
        for n in range(1, horizon):
            weighted = weighted + (1.0 - lam) * lam ** (n - 1) * _n_step_return(arrays, t, n)
        returns[t] = weighted + lam ** (horizon - 1) * _n_step_return(arrays, t, horizon)
    return returns


def monte_carlo_advantage(arrays: RolloutArrays) -> np.ndarray:
    """Discounted reward-to-go with the final Q_T bootstrap, minus the baseline"""
    r, Q = arrays.rewards, arrays.critic_values
    alive = arrays.alive()
    returns = np.zeros(arrays.output_shape)
    running = Q[arrays.length] * np.ones(arrays.output_shape[1:])
    for t in reversed(range(arrays.length)):
        running = r[t] + arrays.gamma * alive[t + 1] * running
        returns[t] = running
    return returns - arrays.baselines


def interpolate_advantage(a_uae: ArrayLike, q_minus_b: ArrayLike, nu: float) -> np.ndarray:
    """(1 - nu) * a_uae + nu * (Q - b)"""
    if not 0.0 <= nu <= 1.0:
        raise ValueError(f"nu must lie in [0, 1], got {nu}")
    return (1.0 - nu) * np.asarray(a_uae, dtype=np.float64) + nu * np.asarray(q_minus_b, dtype=np.float64)
