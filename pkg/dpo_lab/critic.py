"""
Gaussian distributional critic with a target network

Z_w(s, x) = N(mean, stddev^2) where the network's first output is the mean
and the second passes through softplus plus the stddev floor. Losses return
``(loss, gradient)`` pairs; the ``*_update`` methods apply one Adam step.
"""
from typing import Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .buffers import TransitionBatch
from .distributions import (
    SIGMA_FLOOR,
    GaussianValue,
    action_features,
    gaussian_kl,
    gaussian_kl_grad,
    gaussian_log_density,
    gaussian_nll_grad,
)
from .funcapprox import (
    DEFAULT_HIDDEN,
    MlpSpec,
    Network,
    ParamVector,
    forward,
    init_params,
    param_gradient,
    softplus,
)


class ActionSampler(Protocol):
    def sample(self, states: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        ...


class DistributionalCritic:
    """Online critic w, target critic w-bar and the smoothing rate tau"""

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        rng: Optional[np.random.Generator] = None,
        hidden_dims: Sequence[int] = DEFAULT_HIDDEN,
        learning_rate: float = 3e-4,
        tau: float = 5e-3,
        sigma_floor: float = SIGMA_FLOOR,
        params: Optional[ParamVector] = None,
    ):
        if not 0.0 < tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {tau}")
        if sigma_floor <= 0.0:
            raise ValueError(f"sigma_floor must be positive, got {sigma_floor}")
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        spec = MlpSpec(obs_dim + action_dim, tuple(hidden_dims), 2)
        if params is None:
            if rng is None:
                raise ValueError("Either rng or params is required")
            params = init_params(spec, rng)
        self.net = Network(spec, params, learning_rate=learning_rate)
        self.target = ParamVector(params.values.copy())
        self.tau = tau
        self.sigma_floor = sigma_floor

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
                f"Critic expects ({self.obs_dim},) states and ({self.action_dim},) actions, "
                f"got {states.shape} and {xs.shape}"
            )
        return np.hstack([states, action_features(xs)])

    def _heads(self, raw: np.ndarray) -> GaussianValue:
        return GaussianValue(raw[:, 0], softplus(raw[:, 1]) + self.sigma_floor)

    def forward(self, states, xs, target: bool = False) -> GaussianValue:
        """Z(s, x) for a batch, from the online or the target parameters"""
        params = self.target if target else self.params
        return self._heads(forward(self.spec, params, self.inputs(states, xs)))

    def mean_value(self, states, xs, target: bool = False) -> np.ndarray:
        return self.forward(states, xs, target=target).mean

    def _head_gradient(self, inputs: np.ndarray, raw: np.ndarray, d_mean, d_std) -> np.ndarray:
        output_grad = np.column_stack([d_mean, d_std * expit(raw[:, 1])])
        return param_gradient(self.spec, self.params, inputs, output_grad)

    def kl_targets(self, batch: TransitionBatch, next_xs: np.ndarray, gamma: float) -> GaussianValue:
        """r + gamma Z_target(s', x'), with N(r, floor) at terminals"""
        successor = self.forward(batch.next_states, next_xs, target=True)
        alive = 1.0 - batch.terminals
        mean = batch.rewards + gamma * alive * successor.mean
        stddev = np.where(alive > 0.0, np.maximum(gamma * successor.stddev, self.sigma_floor), self.sigma_floor)
        return GaussianValue(mean, stddev)

    def kl_loss_and_grad(self, batch: TransitionBatch, next_xs: np.ndarray, gamma: float) -> Tuple[float, np.ndarray]:
        """Mean KL(target || Z_w(s, x)) over the batch and its gradient in w"""
        if len(batch) == 0:
            raise ValueError("Empty minibatch")
        target = self.kl_targets(batch, next_xs, gamma)
        inputs = self.inputs(batch.states, batch.xs)
        raw = forward(self.spec, self.params, inputs)
        model = self._heads(raw)
        n = len(batch)
        loss = float(np.mean(gaussian_kl(target, model)))
        d_mean, d_std = gaussian_kl_grad(target, model)
        return loss, self._head_gradient(inputs, raw, d_mean / n, d_std / n)

    def kl_td_update(self, batch: TransitionBatch, policy: ActionSampler, gamma: float, rng: np.random.Generator) -> float:
        """Sample x' ~ pi(.|s'), take one Adam step on the KL loss; the target network is untouched"""
        next_xs, _ = policy.sample(batch.next_states, rng)
        loss, grad = self.kl_loss_and_grad(batch, next_xs, gamma)
        self.params.grads += grad
        self.net.step()
        return loss

    def polyak_update(self) -> None:
        """w-bar <- tau w + (1 - tau) w-bar"""
        self.target.values *= 1.0 - self.tau
        self.target.values += self.tau * self.params.values

    def sample_value_vector(self, states, xs, l: int, rng: np.random.Generator, target: bool = False) -> np.ndarray:
        """l independent draws from Z(s, x) per row; shape (n, l)"""
        if l < 1:
            raise ValueError(f"Number of critic samples must be positive, got {l}")
        dist = self.forward(states, xs, target=target)
        noise = rng.standard_normal((dist.mean.shape[0], l))
        return dist.mean[:, None] + dist.stddev[:, None] * noise

    def cross_entropy_loss_and_grad(self, states, xs, targets: np.ndarray) -> Tuple[float, np.ndarray]:
        """
        Mean over rows of -(1/l) sum_i log N(U_i; Z_w(s, x)) and its gradient in w

        Raises:
            ValueError: If ``targets`` is not an (n, l) array matching the batch
        """
        inputs = self.inputs(states, xs)
        targets = np.asarray(targets, dtype=np.float64)
        n = inputs.shape[0]
        if n == 0:
            raise ValueError("Empty minibatch")
        if targets.ndim != 2 or targets.shape[0] != n:
            raise ValueError(f"Targets must have shape ({n}, l), got {targets.shape}")
        raw = forward(self.spec, self.params, inputs)
        model = self._heads(raw)
        column = GaussianValue(model.mean[:, None], model.stddev[:, None])
        loss = float(-np.mean(gaussian_log_density(targets, column)))
        d_mean, d_std = gaussian_nll_grad(targets, column)
        return loss, self._head_gradient(inputs, raw, d_mean.mean(axis=1) / n, d_std.mean(axis=1) / n)

    def cross_entropy_update(self, states, xs, targets: np.ndarray) -> float:
        loss, grad = self.cross_entropy_loss_and_grad(states, xs, targets)
        self.params.grads += grad
        self.net.step()
        return loss
