"""
Residual baseline b(s) = E_pi[(1 + r_phi(s, x)) Q(s, x)]

The residual network r_phi has a linear output so that the multiplier
1 + r_phi can move either side of one. It is trained off-policy on replay
minibatches by minimizing the mean squared gap between the critic's value of
the stored action and the baseline of its state; the critic is a constant in
that objective.
"""
from typing import Optional, Protocol, Sequence, Tuple

import numpy as np

from .distributions import action_features
from .funcapprox import DEFAULT_HIDDEN, MlpSpec, Network, ParamVector, forward, init_params, param_gradient


class ValueSource(Protocol):
    def mean_value(self, states: np.ndarray, xs: np.ndarray) -> np.ndarray:
        ...


class ActionSampler(Protocol):
    def sample(self, states: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        ...


class ResidualBaseline:
    """
    The r_phi network with its optimizer

    Args:
        obs_dim: Observation width
        action_dim: Action width
        rng: Generator for parameter initialization
        m_actions: Policy samples per state approximating the outer expectation
        enabled: With False, r_phi is fixed at zero and updates do nothing
    """

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        rng: Optional[np.random.Generator] = None,
        hidden_dims: Sequence[int] = DEFAULT_HIDDEN,
        learning_rate: float = 3e-4,
        m_actions: int = 30,
        enabled: bool = True,
        params: Optional[ParamVector] = None,
    ):
        if m_actions < 1:
            raise ValueError(f"m_actions must be at least 1, got {m_actions}")
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        spec = MlpSpec(obs_dim + action_dim, tuple(hidden_dims), 1)
        if params is None:
            if rng is None:
                raise ValueError("Either rng or params is required")
            params = init_params(spec, rng)
        self.net = Network(spec, params, learning_rate=learning_rate)
        self.m_actions = m_actions
        self.enabled = enabled

    @property
    def spec(self) -> MlpSpec:
        return self.net.spec

    @property
    def params(self) -> ParamVector:
        return self.net.params

    def inputs(self, states, xs) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        if states.shape[1] != self.obs_dim or xs.shape[1] != self.action_dim or states.shape[0] != xs.shape[0]:
            raise ValueError(
                f"Baseline expects ({self.obs_dim},) states and ({self.action_dim},) actions, "
                f"got {states.shape} and {xs.shape}"
            )
        return np.hstack([states, action_features(xs)])

    def residual(self, states, xs) -> np.ndarray:
        """r_phi(s, x) for each row"""
        inputs = self.inputs(states, xs)
        if not self.enabled:
            return np.zeros(inputs.shape[0])
        return forward(self.spec, self.params, inputs)[:, 0]

    def _sampled_terms(self, states, critic: ValueSource, policy: ActionSampler, rng, m: int):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        repeated = np.repeat(states, m, axis=0)
        xs, _ = policy.sample(repeated, rng)
        q = critic.mean_value(repeated, xs)
        r = self.residual(repeated, xs)
        return repeated, xs, q.reshape(-1, m), r.reshape(-1, m)

    def baseline_value(
        self,
        states,
        critic: ValueSource,
        policy: ActionSampler,
        rng: np.random.Generator,
        m: Optional[int] = None,
    ) -> np.ndarray:
        """(1/m) sum_i (1 + r_phi(s, x_i)) Q(s, x_i) with x_i ~ pi(.|s), per state"""
        m = self.m_actions if m is None else m
        if m < 1:
            raise ValueError(f"m must be at least 1, got {m}")
        _, _, q, r = self._sampled_terms(states, critic, policy, rng, m)
        return np.mean((1.0 + r) * q, axis=1)

    def loss_and_grad(
        self,
        states,
        xs,
        critic: ValueSource,
        policy: ActionSampler,
        rng: np.random.Generator,
        m: Optional[int] = None,
    ) -> Tuple[float, np.ndarray]:
        """
        Mean of (Q(s, x) - b(s))^2 over the replay minibatch and its gradient in phi

        Raises:
            ValueError: If the minibatch is empty
        """
        m = self.m_actions if m is None else m
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        n = states.shape[0]
        if n == 0:
            raise ValueError("Empty minibatch")
        stored_q = critic.mean_value(states, xs)
        repeated, sampled_xs, q, r = self._sampled_terms(states, critic, policy, rng, m)
        gap = stored_q - np.mean((1.0 + r) * q, axis=1)
        loss = float(np.mean(gap ** 2))
        if not self.enabled:
            return loss, np.zeros(len(self.params))
        d_residual = -2.0 * gap[:, None] / n * q / m
        grad = param_gradient(self.spec, self.params, self.inputs(repeated, sampled_xs), d_residual.reshape(-1, 1))
        return loss, grad

    def update(self, states, xs, critic: ValueSource, policy: ActionSampler, rng: np.random.Generator) -> float:
        """One Adam step on the baseline objective; returns the loss before the step"""
        loss, grad = self.loss_and_grad(states, xs, critic, policy, rng)
        if self.enabled:
            self.params.grads += grad
            self.net.step()
        return loss
