"""
Toy continuous-control tasks and finite MDPs

The continuous tasks are small stateful objects driven by an explicit
``numpy.random.Generator``; the same state, action and generator state always
reproduce the same step. Finite MDPs are plain arrays consumed by the oracle
module and stored on disk as whitespace-separated tables.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Type, Union

import numpy as np

from .distributions import ActionBounds

logger = logging.getLogger(__name__)

FIXTURE_DIR = Path(__file__).parent / "fixtures"
PROBABILITY_TOLERANCE = 1e-12


class StepResult(NamedTuple):
    next_state: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


class ContinuousEnv:
    """
    Base class for the continuous tasks

    Subclasses provide ``_initial_state``, ``_dynamics`` and optionally
    ``_observe`` when the observation differs from the internal state.
    """

    name = "base"
    state_dim = 0
    action_dim = 0
    reward_bound = 0.0

    def __init__(self, bounds: ActionBounds, horizon: int = 200):
        if horizon < 1:
            raise ValueError(f"Horizon must be positive, got {horizon}")
        if bounds.dim != self.action_dim:
            raise ValueError(f"{self.name} expects {self.action_dim}-dimensional bounds, got {bounds.dim}")
        self.bounds = bounds
        self.horizon = horizon
        self.state: Optional[np.ndarray] = None
        self.elapsed = 0

    def _initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _dynamics(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float, bool]:
        raise NotImplementedError

    def _observe(self, state: np.ndarray) -> np.ndarray:
        return state.copy()

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Start a new episode and return its first observation"""
        self.state = self._initial_state(rng)
        self.elapsed = 0
        return self._observe(self.state)

    def restore(self, state: np.ndarray, elapsed: int = 0) -> np.ndarray:
        """Put the environment back into a previously recorded internal state"""
        self.state = np.array(state, dtype=np.float64)
        self.elapsed = int(elapsed)
        return self._observe(self.state)

    def snapshot(self) -> Tuple[np.ndarray, int]:
        if self.state is None:
            raise RuntimeError("Environment has not been reset")
        return self.state.copy(), self.elapsed

    def step(self, action, rng: np.random.Generator) -> StepResult:
        """
        Advance the dynamics by one step

        Args:
            action: Action inside the environment's bounds
            rng: Generator for any dynamics noise

        Returns:
            StepResult: Next observation, reward and the terminal/truncated flags

        Raises:
            ValueError: If the action is outside the bounds
            RuntimeError: If called before ``reset``
        """
        if self.state is None:
            raise RuntimeError("Environment has not been reset")
        action = np.atleast_1d(np.asarray(action, dtype=np.float64))
        if action.shape != (self.action_dim,) or not np.all(np.isfinite(action)):
            raise ValueError(f"{self.name} expects a finite action of shape ({self.action_dim},), got {action}")
        slack = 1e-9 * np.maximum(1.0, self.bounds.scale)
        if np.any(action < self.bounds.lower - slack) or np.any(action > self.bounds.upper + slack):
            raise ValueError(f"Action {action} outside bounds [{self.bounds.lower}, {self.bounds.upper}]")
        action = np.clip(action, self.bounds.lower, self.bounds.upper)

        self.state, reward, terminal = self._dynamics(self.state, action, rng)
        self.elapsed += 1
        truncated = not terminal and self.elapsed >= self.horizon
        return StepResult(self._observe(self.state), float(reward), bool(terminal), bool(truncated))


class PointMass2D(ContinuousEnv):
    """Force-controlled point mass that should come to rest at the origin"""

    name = "pointmass"
    state_dim = 4
    action_dim = 2
    dt = 0.1
    limit = 2.0
    reward_bound = 2 * 2.0 ** 2 + 0.01 * 2

    def __init__(self, horizon: int = 200):
        super().__init__(ActionBounds.symmetric(1.0, 2), horizon)
        self.goal = np.zeros(2)

    def _initial_state(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    def _dynamics(self, state, action, rng):
        pos, vel = state[:2], state[2:]
        vel = np.clip(vel + self.dt * action, -self.limit, self.limit)
        pos = np.clip(pos + self.dt * vel, -self.limit, self.limit)
        reward = -np.sum((pos - self.goal) ** 2) - 0.01 * np.sum(action ** 2)
        return np.concatenate([pos, vel]), reward, False


def angle_normalize(x):
    return ((x + np.pi) % (2.0 * np.pi)) - np.pi


class Pendulum(ContinuousEnv):
    """Torque-limited swing-up; angle 0 is upright"""

    name = "pendulum"
    state_dim = 3
    action_dim = 1
    max_speed = 8.0
    max_torque = 2.0
    dt = 0.05
    g = 10.0
    m = 1.0
    length = 1.0
    reward_bound = np.pi ** 2 + 0.1 * 8.0 ** 2 + 0.001 * 2.0 ** 2

    def __init__(self, horizon: int = 200):
        super().__init__(ActionBounds.symmetric(self.max_torque, 1), horizon)

    def _initial_state(self, rng):
        return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])

    def _dynamics(self, state, action, rng):
        theta, omega = state
        u = float(action[0])
        reward = -(angle_normalize(theta) ** 2 + 0.1 * omega ** 2 + 0.001 * u ** 2)
        omega = omega + (3.0 * self.g / (2.0 * self.length) * np.sin(theta) + 3.0 / (self.m * self.length ** 2) * u) * self.dt
        omega = float(np.clip(omega, -self.max_speed, self.max_speed))
        theta = theta + omega * self.dt
        return np.array([theta, omega]), reward, False

    def _observe(self, state):
        theta, omega = state
        return np.array([np.cos(theta), np.sin(theta), omega])


class Lqr1D(ContinuousEnv):
    """Scalar linear system x' = a x + b u + noise with quadratic cost"""

    name = "lqr1d"
    state_dim = 1
    action_dim = 1
    a = 0.9
    b = 0.5
    state_cost = 1.0
    action_cost = 0.1
    noise_std = 0.05
    state_limit = 5.0
    reward_bound = 5.0 ** 2 + 0.1 * 2.0 ** 2

    def __init__(self, horizon: int = 200):
        super().__init__(ActionBounds.symmetric(2.0, 1), horizon)

    def _initial_state(self, rng):
        return np.array([rng.uniform(-1.0, 1.0)])

    def _dynamics(self, state, action, rng):
        x, u = float(state[0]), float(action[0])
        reward = -(self.state_cost * x ** 2 + self.action_cost * u ** 2)
        x_next = self.a * x + self.b * u + self.noise_std * rng.standard_normal()
        return np.array([np.clip(x_next, -self.state_limit, self.state_limit)]), reward, False


def lqr_riccati(env: Optional[Lqr1D] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Finite-horizon Riccati recursion for the LQR task, ignoring clipping

    Returns:
        Tuple of (P, c, K) with one entry per remaining step count 0..horizon:
        the optimal cost-to-go from x with k steps left is P[k] x^2 + c[k],
        and the optimal action with k steps left is -K[k] x.
    """
    env = env or Lqr1D()
    H = env.horizon
    P, c, K = np.zeros(H + 1), np.zeros(H + 1), np.zeros(H + 1)
    for k in range(1, H + 1):
        p = P[k - 1]
        K[k] = env.a * env.b * p / (env.action_cost + env.b ** 2 * p)
        P[k] = env.state_cost + env.a ** 2 * p - (env.a * env.b * p) ** 2 / (env.action_cost + env.b ** 2 * p)
        c[k] = c[k - 1] + p * env.noise_std ** 2
    return P, c, K


def lqr_optimal_return(env: Optional[Lqr1D] = None) -> float:
    """Expected undiscounted episode return of the optimal linear controller from x0 ~ U[-1, 1]"""
    env = env or Lqr1D()
    P, c, _ = lqr_riccati(env)
    mean_sq_start = 1.0 / 3.0
    return float(-(P[env.horizon] * mean_sq_start + c[env.horizon]))


ENVIRONMENTS: Dict[str, Type[ContinuousEnv]] = {
    PointMass2D.name: PointMass2D,
    Pendulum.name: Pendulum,
    Lqr1D.name: Lqr1D,
}


def make_env(name: str, horizon: Optional[int] = None) -> ContinuousEnv:
    """
    Build a task by name

    Raises:
        ValueError: If the name is not one of ``ENVIRONMENTS``
    """
    if name not in ENVIRONMENTS:
        raise ValueError(f"Unknown environment '{name}'. Choose from: {', '.join(sorted(ENVIRONMENTS))}")
    cls = ENVIRONMENTS[name]
    return cls() if horizon is None else cls(horizon=horizon)


@dataclass
class TabularMDP:
    """Finite MDP with transition tensor P[s, a, s'], rewards r[s, a], discount and start distribution"""

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    initial: np.ndarray

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.gamma = float(self.gamma)

        if self.transitions.ndim != 3 or self.transitions.shape[0] != self.transitions.shape[2]:
            raise ValueError(f"Transition tensor must have shape (S, A, S), got {self.transitions.shape}")
        S, A, _ = self.transitions.shape
        if self.rewards.shape != (S, A):
            raise ValueError(f"Reward table must have shape ({S}, {A}), got {self.rewards.shape}")
        if self.initial.shape != (S,):
            raise ValueError(f"Initial distribution must have length {S}, got {self.initial.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"Discount must lie in [0, 1), got {self.gamma}")
        if np.any(self.transitions < 0.0) or np.any(np.abs(self.transitions.sum(axis=2) - 1.0) > PROBABILITY_TOLERANCE):
            raise ValueError("Every transition row P[s, a] must be a probability vector")
        if np.any(self.initial < 0.0) or abs(self.initial.sum() - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError("Initial distribution must be a probability vector")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("Rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def policy_transitions(self, policy: np.ndarray) -> np.ndarray:
        """State-to-state matrix P_pi[s, s'] under a tabular policy pi[s, a]"""
        return np.einsum("sa,sat->st", check_tabular_policy(self, policy), self.transitions)

    def sample_suffixes(self, policy: np.ndarray, states, actions, length: int, rng: np.random.Generator) -> "Suffixes":
        """
        Continue many trajectories from given (s, a) pairs for ``length`` steps

        Returns:
            Suffixes: states and actions of shape (N, length + 1), rewards of shape (N, length)
        """
        policy = check_tabular_policy(self, policy)
        states = np.asarray(states, dtype=np.int64).ravel()
        actions = np.asarray(actions, dtype=np.int64).ravel()
        if states.shape != actions.shape:
            raise ValueError("states and actions must have the same length")
        n = states.size
        s_out = np.empty((n, length + 1), dtype=np.int64)
        a_out = np.empty((n, length + 1), dtype=np.int64)
        r_out = np.empty((n, length))
        s_out[:, 0], a_out[:, 0] = states, actions
        for k in range(length):
            s, a = s_out[:, k], a_out[:, k]
            r_out[:, k] = self.rewards[s, a]
            s_out[:, k + 1] = categorical(self.transitions[s, a], rng)
            a_out[:, k + 1] = categorical(policy[s_out[:, k + 1]], rng)
        return Suffixes(s_out, a_out, r_out)


class Suffixes(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray


class Episode(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray


def categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of a (N, K) probability matrix by inverting the cumulative sum"""
    probs = np.atleast_2d(probs)
    u = rng.random(probs.shape[0])
    idx = np.sum(np.cumsum(probs, axis=1) < u[:, None], axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def check_tabular_policy(mdp: TabularMDP, policy) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"Policy table must have shape ({mdp.n_states}, {mdp.n_actions}), got {policy.shape}")
    if np.any(policy < 0.0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("Policy rows must be probability vectors")
    return policy


def mdp_sample_episode(mdp: TabularMDP, policy, horizon: int, rng: np.random.Generator) -> Episode:
    """Sample s0 ~ rho0 and follow the policy for ``horizon`` steps"""
    policy = check_tabular_policy(mdp, policy)
    if horizon < 1:
        raise ValueError(f"Horizon must be positive, got {horizon}")
    states = np.empty(horizon, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    rewards = np.empty(horizon)
    s = int(categorical(mdp.initial, rng)[0])
    for t in range(horizon):
        a = int(categorical(policy[s], rng)[0])
        states[t], actions[t], rewards[t] = s, a, mdp.rewards[s, a]
        s = int(categorical(mdp.transitions[s, a], rng)[0])
    return Episode(states, actions, rewards)


def random_mdp(
    n_states: int,
    n_actions: int,
    gamma: float,
    rng: np.random.Generator,
    concentration: float = 1.0,
) -> TabularMDP:
    """Dirichlet transition rows, uniform rewards in [-1, 1], uniform start distribution"""
    transitions = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    # Renormalize so rows pass the probability check after Dirichlet rounding
    transitions /= transitions.sum(axis=2, keepdims=True)
    rewards = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return TabularMDP(transitions, rewards, gamma, np.full(n_states, 1.0 / n_states))


def save_mdp(mdp: TabularMDP, path: Union[str, Path]) -> Path:
    """
    Write ``tabular <S> <A> <gamma>`` then S*A transition rows, S reward rows and the start row
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"tabular {mdp.n_states} {mdp.n_actions} {mdp.gamma!r}"]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            lines.append(" ".join(repr(float(p)) for p in mdp.transitions[s, a]))
    for s in range(mdp.n_states):
        lines.append(" ".join(repr(float(r)) for r in mdp.rewards[s]))
    lines.append(" ".join(repr(float(p)) for p in mdp.initial))
    path.write_text("\n".join(lines) + "\n")
    return path


def load_mdp(path: Union[str, Path]) -> TabularMDP:
    """
    Read a table written by ``save_mdp``; ``#`` starts a comment

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the header or any row is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"MDP file not found: {path}")
    rows: List[List[str]] = []
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    if not rows or rows[0][0] != "tabular" or len(rows[0]) != 4:
        raise ValueError(f"{path}: expected header 'tabular <S> <A> <gamma>'")
    try:
        S, A, gamma = int(rows[0][1]), int(rows[0][2]), float(rows[0][3])
        body = [[float(v) for v in row] for row in rows[1:]]
    except ValueError as e:
        raise ValueError(f"{path}: {e}")
    if len(body) != S * A + S + 1:
        raise ValueError(f"{path}: expected {S * A + S + 1} data rows, found {len(body)}")
    widths = [S] * (S * A) + [A] * S + [S]
    for i, (row, width) in enumerate(zip(body, widths)):
        if len(row) != width:
            raise ValueError(f"{path}: data row {i + 1} has {len(row)} values, expected {width}")
    transitions = np.array(body[: S * A]).reshape(S, A, S)
    rewards = np.array(body[S * A : S * A + S])
    return TabularMDP(transitions, rewards, gamma, np.array(body[-1]))


def fixture_names() -> List[str]:
    return sorted(p.stem for p in FIXTURE_DIR.glob("*.mdp"))


def load_fixture(name: str) -> TabularMDP:
    """Load one of the MDPs shipped in ``dpo_lab/fixtures``"""
    path = FIXTURE_DIR / f"{name}.mdp"
    if not path.exists():
        raise ValueError(f"Unknown fixture MDP '{name}'. Available: {', '.join(fixture_names())}")
    return load_mdp(path)
