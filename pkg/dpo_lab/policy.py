"""
Beta policy and policy improvement

The objective mixes an on-policy surrogate over the current batch with an
optimistic off-policy term over replayed states:

    J(theta) = omega * J_on + (1 - omega) * E[(Q - b)^+ - alpha * log pi(x|s)]

Every loss function here returns ``(loss, gradient)`` with loss = -objective,
so the optimizer always minimizes.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import expit

from .distributions import (
    ACTION_EPS,
    BetaParams,
    beta_entropy,
    beta_fisher_diag,
    beta_kl,
    beta_log_density,
    beta_log_density_grad,
    beta_shapes_from_output,
)
from .errors import NonFiniteError
from .funcapprox import (
    DEFAULT_HIDDEN,
    MlpSpec,
    Network,
    ParamVector,
    clip_grad_norm,
    forward,
    init_params,
    jvp,
    param_gradient,
    per_sample_sq_grad_norms,
)

logger = logging.getLogger(__name__)

LEARNERS = ("a2c", "trpo", "ppo")


@dataclass
class PolicyConfig:
    """Policy-improvement hyperparameters"""

    learner: str = "ppo"
    omega: float = 0.7
    alpha: float = 0.03
    ppo_clip: float = 0.2
    max_kl: float = 0.1
    damping: float = 0.1
    cg_iters: int = 10
    cg_tol: float = 1e-2
    backtrack_steps: int = 10
    grad_clip: float = 100.0

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ValueError(f"Unknown learner '{self.learner}'. Choose from: {', '.join(LEARNERS)}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.ppo_clip <= 0.0 or self.max_kl < 0.0 or self.damping < 0.0:
            raise ValueError("ppo_clip must be positive; max_kl and damping non-negative")


class BetaPolicy:
    """Product of Betas over unit-interval actions with shapes softplus(.) + 1"""

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        rng: Optional[np.random.Generator] = None,
        hidden_dims: Sequence[int] = DEFAULT_HIDDEN,
        learning_rate: float = 3e-4,
        params: Optional[ParamVector] = None,
    ):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        spec = MlpSpec(obs_dim, tuple(hidden_dims), 2 * action_dim)
        if params is None:
            if rng is None:
                raise ValueError("Either rng or params is required")
            params = init_params(spec, rng)
        self.net = Network(spec, params, learning_rate=learning_rate)

    @property
    def spec(self) -> MlpSpec:
        return self.net.spec

    @property
    def params(self) -> ParamVector:
        return self.net.params

    def _raw(self, states, values: Optional[np.ndarray] = None) -> np.ndarray:
        params = self.params if values is None else ParamVector(values)
        return forward(self.spec, params, np.atleast_2d(np.asarray(states, dtype=np.float64)))

    def shapes(self, states, values: Optional[np.ndarray] = None) -> BetaParams:
        return beta_shapes_from_output(self._raw(states, values))

    def sample(self, states, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Draw x ~ pi(.|s) per row; returns (xs, log-likelihoods of xs)"""
        shapes = self.shapes(states)
        xs = np.clip(rng.beta(shapes.alpha, shapes.beta), ACTION_EPS, 1.0 - ACTION_EPS)
        return xs, beta_log_density(xs, shapes)

    def log_prob(self, states, xs, values: Optional[np.ndarray] = None) -> np.ndarray:
        return beta_log_density(xs, self.shapes(states, values))

    def mean_action(self, states) -> np.ndarray:
        return self.shapes(states).mean

    def entropy(self, states) -> np.ndarray:
        return beta_entropy(self.shapes(states))

    def score_output_grad(self, states, xs, weights) -> np.ndarray:
        """Output-space gradient of sum_i w_i log pi(x_i|s_i), for backpropagation"""
        raw = self._raw(states)
        shapes = beta_shapes_from_output(raw)
        d_alpha, d_beta = beta_log_density_grad(xs, shapes)
        d = self.action_dim
        w = np.asarray(weights, dtype=np.float64)[:, None]
        return np.hstack([w * d_alpha * expit(raw[:, :d]), w * d_beta * expit(raw[:, d:])])

    def score_gradient(self, states, xs, weights) -> np.ndarray:
        """sum_i w_i grad_theta log pi(x_i|s_i)"""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return param_gradient(self.spec, self.params, states, self.score_output_grad(states, xs, weights))

    def score_sq_norms(self, states, xs) -> np.ndarray:
        """||grad_theta log pi(x_i|s_i)||^2 per row"""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        output_grad = self.score_output_grad(states, xs, np.ones(states.shape[0]))
        return per_sample_sq_grad_norms(self.spec, self.params, states, output_grad)

    def fisher_vector_product(self, states, vector: np.ndarray, damping: float = 0.0) -> np.ndarray:
        """(F + damping I) v with F the batch-mean Fisher information of pi in theta"""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        n, d = states.shape[0], self.action_dim
        raw, raw_tangent = jvp(self.spec, self.params, states, vector)
        slope_a, slope_b = expit(raw[:, :d]), expit(raw[:, d:])
        d_alpha = slope_a * raw_tangent[:, :d]
        d_beta = slope_b * raw_tangent[:, d:]
        i_aa, i_ab, i_bb = beta_fisher_diag(beta_shapes_from_output(raw))
        g_alpha = i_aa * d_alpha + i_ab * d_beta
        g_beta = i_ab * d_alpha + i_bb * d_beta
        output_grad = np.hstack([slope_a * g_alpha, slope_b * g_beta]) / n
        return param_gradient(self.spec, self.params, states, output_grad) + damping * vector


class PolicyBatch(NamedTuple):
    """On-policy minibatch: normalized states, actions, stored log-likelihoods and advantages"""

    states: np.ndarray
    xs: np.ndarray
    log_probs: Optional[np.ndarray]
    advantages: np.ndarray

    def subset(self, indices) -> "PolicyBatch":
        return PolicyBatch(
            self.states[indices],
            self.xs[indices],
            None if self.log_probs is None else self.log_probs[indices],
            self.advantages[indices],
        )


@dataclass
class UpdateStats:
    loss_on: float = float("nan")
    loss_off: float = float("nan")
    mean_pos_adv: float = float("nan")
    grad_norm: float = float("nan")
    step_fraction: float = float("nan")


def positive_advantage(q, b) -> np.ndarray:
    """(q - b)^+"""
    return np.maximum(np.asarray(q, dtype=np.float64) - np.asarray(b, dtype=np.float64), 0.0)


def _ratios(policy: BetaPolicy, batch: PolicyBatch, values=None) -> np.ndarray:
    return np.exp(policy.log_prob(batch.states, batch.xs, values) - batch.log_probs)


def surrogate_objective(learner: str, policy: BetaPolicy, batch: PolicyBatch, clip: float = 0.2, values=None) -> float:
    """Value of the on-policy objective (not the loss) at ``values`` or the current parameters"""
    if learner == "a2c":
        return float(np.mean(policy.log_prob(batch.states, batch.xs, values) * batch.advantages))
    ratio = _ratios(policy, batch, values)
    if learner == "ppo":
        clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
        return float(np.mean(np.minimum(ratio * batch.advantages, clipped * batch.advantages)))
    return float(np.mean(ratio * batch.advantages))


def on_policy_surrogate(learner: str, policy: BetaPolicy, batch: PolicyBatch, clip: float = 0.2) -> Tuple[float, np.ndarray]:
    """
    Loss and gradient of the learner's on-policy surrogate

    ppo: clipped ratio objective; a2c: log pi * A; trpo: ratio * A (the trust
    region is enforced by ``trpo_step``).

    Raises:
        ValueError: For an unknown learner or a batch without stored log-likelihoods
    """
    if learner not in LEARNERS:
        raise ValueError(f"Unknown learner '{learner}'. Choose from: {', '.join(LEARNERS)}")
    n = batch.advantages.shape[0]
    if n == 0:
        raise ValueError("Empty on-policy batch")
    advantages = batch.advantages
    if learner == "a2c":
        weights = advantages / n
    else:
        if batch.log_probs is None:
            raise ValueError(f"The {learner} surrogate needs the stored log-likelihoods of the batch")
        ratio = _ratios(policy, batch)
        if learner == "ppo":
            clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
            # Only samples where the unclipped branch attains the minimum carry gradient
            active = ratio * advantages <= clipped * advantages
            weights = np.where(active, ratio * advantages, 0.0) / n
        else:
            weights = ratio * advantages / n
    loss = -surrogate_objective(learner, policy, batch, clip)
    return loss, -policy.score_gradient(batch.states, batch.xs, weights)


class OffPolicyResult(NamedTuple):
    loss: float
    grad: np.ndarray
    mean_pos_adv: float


def off_policy_surrogate(policy: BetaPolicy, critic, baseline, states, alpha: float, rng: np.random.Generator) -> OffPolicyResult:
    """
    Score-function estimate of the optimistic off-policy term on replayed states

    Fresh actions x ~ pi(.|s) are weighted by stopgrad((Q(s, x) - b(s))^+ - alpha log pi(x|s)).

    Raises:
        ValueError: If ``states`` is empty
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]
    if n == 0:
        raise ValueError("Empty replay minibatch")
    xs, log_probs = policy.sample(states, rng)
    q = critic.mean_value(states, xs)
    b = baseline.baseline_value(states, critic, policy, rng)
    advantage = positive_advantage(q, b)
    weights = advantage - alpha * log_probs
    grad = -policy.score_gradient(states, xs, weights / n)
    return OffPolicyResult(float(-np.mean(weights)), grad, float(np.mean(advantage)))


def _apply(policy: BetaPolicy, grad: np.ndarray, grad_clip: float) -> float:
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("Non-finite policy gradient")
    policy.params.grads += grad
    norm = clip_grad_norm(policy.params, grad_clip)
    if norm > grad_clip:
        logger.warning("Policy gradient norm %.3g clipped to %.3g", norm, grad_clip)
    policy.net.step()
    return norm


def combined_update(
    config: PolicyConfig,
    policy: BetaPolicy,
    batch: PolicyBatch,
    critic=None,
    baseline=None,
    replay_states: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> UpdateStats:
    """
    One step on omega * on-policy loss + (1 - omega) * off-policy loss

    With omega = 1 the replay buffer, critic and baseline are not touched.
    The trpo learner is delegated to ``trpo_step``.
    """
    omega = config.omega
    off = None
    if omega < 1.0:
        if replay_states is None or critic is None or baseline is None or rng is None:
            raise ValueError("omega < 1 needs replay states, a critic, a baseline and a generator")
        off = off_policy_surrogate(policy, critic, baseline, replay_states, config.alpha, rng)

    if config.learner == "trpo":
        return trpo_step(config, policy, batch, None if off is None else off.grad, off)

    loss_on, grad_on = on_policy_surrogate(config.learner, policy, batch, config.ppo_clip)
    grad = grad_on if off is None else omega * grad_on + (1.0 - omega) * off.grad
    norm = _apply(policy, grad, config.grad_clip)
    return UpdateStats(
        loss_on=loss_on,
        loss_off=float("nan") if off is None else off.loss,
        mean_pos_adv=float("nan") if off is None else off.mean_pos_adv,
        grad_norm=norm,
    )


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray, iters: int = 10, tol: float = 1e-10) -> Tuple[np.ndarray, bool]:
    """
    Solve A x = b for symmetric positive definite A given only products A v

    Returns:
        Tuple of (solution, converged) where converged means the relative residual reached ``tol``
    """
    b = np.asarray(b, dtype=np.float64)
    operator = LinearOperator((b.size, b.size), matvec=matvec, dtype=np.float64)
    x, info = cg(operator, b, rtol=tol, atol=0.0, maxiter=iters)
    return x, info == 0


def mean_kl(policy: BetaPolicy, states, old: BetaParams, values: np.ndarray) -> float:
    return float(np.mean(beta_kl(old, policy.shapes(states, values))))


def trpo_step(
    config: PolicyConfig,
    policy: BetaPolicy,
    batch: PolicyBatch,
    off_grad: Optional[np.ndarray] = None,
    off: Optional[OffPolicyResult] = None,
) -> UpdateStats:
    """
    Natural-gradient step with backtracking under mean KL <= max_kl

    theta <- theta + omega * delta_theta, followed by an Adam step on the
    off-policy gradient computed beforehand at the old parameters, scaled by
    (1 - omega). A conjugate-gradient failure falls back to the plain gradient.
    """
    if batch.log_probs is None:
        raise ValueError("The trpo surrogate needs the stored log-likelihoods of the batch")
    theta_old = policy.params.values.copy()
    old_shapes = policy.shapes(batch.states)
    loss_on, loss_grad = on_policy_surrogate("trpo", policy, batch)
    objective_old = -loss_on
    g = -loss_grad

    def fvp(v):
        return policy.fisher_vector_product(batch.states, v, config.damping)

    direction, converged = conjugate_gradient(fvp, g, config.cg_iters, config.cg_tol)
    curvature = float(direction @ fvp(direction)) if np.all(np.isfinite(direction)) else float("nan")
    if not converged or not np.isfinite(curvature) or curvature <= 0.0:
        logger.warning("Conjugate gradient did not converge in %d iterations; using the gradient direction", config.cg_iters)
        direction = g
        curvature = float(direction @ fvp(direction))

    delta = np.zeros_like(theta_old)
    accepted = 0.0
    if curvature > 0.0 and config.max_kl > 0.0:
        full_step = np.sqrt(2.0 * config.max_kl / curvature) * direction
        for k in range(config.backtrack_steps):
            fraction = 0.5 ** k
            candidate = theta_old + fraction * full_step
            improvement = surrogate_objective("trpo", policy, batch, values=candidate) - objective_old
            if improvement > 0.0 and mean_kl(policy, batch.states, old_shapes, candidate) <= config.max_kl:
                delta = fraction * full_step
                accepted = fraction
                break
        else:
            logger.debug("Line search rejected every step")

    policy.params.values[:] = theta_old + config.omega * delta
    if off_grad is not None and config.omega < 1.0:
        _apply(policy, (1.0 - config.omega) * off_grad, config.grad_clip)
    return UpdateStats(
        loss_on=loss_on,
        loss_off=float("nan") if off is None else off.loss,
        mean_pos_adv=float("nan") if off is None else off.mean_pos_adv,
        grad_norm=float(np.linalg.norm(g)),
        step_fraction=accepted,
    )


def normalize_advantages(advantages) -> np.ndarray:
    """
    Standardize a batch to zero mean and unit standard deviation

    Raises:
        ValueError: If the batch has fewer than two entries
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size < 2:
        raise ValueError(f"Advantage normalization needs at least 2 entries, got {advantages.size}")
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


class RunningNormalizer:
    """Streaming per-dimension mean and variance (parallel update) with clipped standardization"""

    def __init__(self, dim: int, clip: float = 10.0, epsilon: float = 1e-8):
        self.dim = dim
        self.clip = clip
        self.epsilon = epsilon
        self.count = 0
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)

    def update(self, batch) -> None:
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.dim)
        if batch.shape[0] == 0:
            return
        batch_mean = batch.mean(axis=0)
        batch_var = batch.var(axis=0)
        batch_count = batch.shape[0]

        delta = batch_mean - self.mean
        total = self.count + batch_count
        m2 = self.var * self.count + batch_var * batch_count + delta ** 2 * self.count * batch_count / total
        self.mean = self.mean + delta * batch_count / total
        self.var = m2 / total
        self.count = total

    def normalize(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        return np.clip((obs - self.mean) / np.sqrt(self.var + self.epsilon), -self.clip, self.clip)

    def state_dict(self) -> Dict:
        return {"count": self.count, "mean": self.mean.tolist(), "var": self.var.tolist(), "clip": self.clip}

    @classmethod
    def from_dict(cls, data: Dict) -> "RunningNormalizer":
        normalizer = cls(len(data["mean"]), clip=data.get("clip", 10.0))
        normalizer.count = data["count"]
        normalizer.mean = np.asarray(data["mean"], dtype=np.float64)
        normalizer.var = np.asarray(data["var"], dtype=np.float64)
        return normalizer


class RewardScaler:
    """Divides rewards by the running std of the discounted return, reset at episode ends"""

    def __init__(self, gamma: float, epsilon: float = 1e-8):
        self.gamma = gamma
        self.epsilon = epsilon
        self.returns = RunningNormalizer(1, clip=np.inf)
        self.running_return = 0.0

    def update(self, reward: float, episode_end: bool) -> None:
        self.running_return = self.gamma * self.running_return + reward
        self.returns.update([self.running_return])
        if episode_end:
            self.running_return = 0.0

    @property
    def std(self) -> float:
        if self.returns.count < 2:
            return 1.0
        return float(np.sqrt(self.returns.var[0] + self.epsilon))

    def scale(self, rewards) -> np.ndarray:
        return np.asarray(rewards, dtype=np.float64) / self.std

    def state_dict(self) -> Dict:
        return {"gamma": self.gamma, "running_return": self.running_return, "returns": self.returns.state_dict()}

    @classmethod
    def from_dict(cls, data: Dict) -> "RewardScaler":
        scaler = cls(data["gamma"])
        scaler.running_return = data["running_return"]
        scaler.returns = RunningNormalizer.from_dict(data["returns"])
        return scaler
