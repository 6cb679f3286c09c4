"""
Ground truth on tabular MDPs

Exact policy evaluation, the variance-minimizing baseline, Monte-Carlo checks
of the advantage estimators against closed forms, the distributional backup
and the stability and variance diagnostics. Checks return ``CheckResult``
records; the verify module turns them into reports.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from .environments import Suffixes, TabularMDP, categorical
from .errors import UndefinedBaselineError, UnsupportedCapabilityError
from .estimators import RolloutArrays, gae, monte_carlo_advantage, uae

logger = logging.getLogger(__name__)

Z_GATE = 4.0
TRUNCATION_EPS = 1e-8


@dataclass
class CheckResult:
    """One named check: the statistic compared against its threshold"""

    name: str
    statistic: float
    threshold: float
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)

    def to_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name} {self.statistic:.6g} {self.threshold:.6g} {status}"

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["statistic"] = float(self.statistic)
        data["threshold"] = float(self.threshold)
        data["passed"] = bool(self.passed)
        return data


class TabularSoftmaxPolicy:
    """pi(a|s) = softmax(theta[s])[a], with score u = grad_theta log pi"""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ValueError(f"Logits must be an (S, A) table, got shape {self.logits.shape}")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularSoftmaxPolicy":
        return cls(np.zeros((n_states, n_actions)))

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: np.random.Generator, scale: float = 1.0) -> "TabularSoftmaxPolicy":
        return cls(scale * rng.standard_normal((n_states, n_actions)))

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def score(self, state: int, action: int) -> np.ndarray:
        """grad of log pi(a|s) in the flattened logits: indicator minus probabilities in row s"""
        u = np.zeros_like(self.logits)
        u[state] = -self.probs[state]
        u[state, action] += 1.0
        return u.ravel()

    def score_sq_norm(self) -> np.ndarray:
        """||u(s, a)||^2 = 1 - 2 pi(a|s) + sum_b pi(b|s)^2, as an (S, A) table"""
        p = self.probs
        return 1.0 - 2.0 * p + np.sum(p ** 2, axis=1, keepdims=True)


class ExactValues(NamedTuple):
    q: np.ndarray
    v: np.ndarray
    visitation: np.ndarray

    def advantage(self) -> np.ndarray:
        return self.q - self.v[:, None]


def solve_q(mdp: TabularMDP, policy: TabularSoftmaxPolicy) -> ExactValues:
    """
    Exact Q, V and unnormalized discounted visitation by dense linear solves

    Raises:
        RuntimeError: If the Bellman system is singular
    """
    S, A = mdp.n_states, mdp.n_actions
    pi = policy.probs
    if pi.shape != (S, A):
        raise ValueError(f"Policy has shape {pi.shape}, MDP needs ({S}, {A})")
    # (P Pi)[(s, a), (s', a')] = P[s, a, s'] pi(a'|s')
    p_pi = (mdp.transitions[:, :, :, None] * pi[None, None, :, :]).reshape(S * A, S * A)
    try:
        q = np.linalg.solve(np.eye(S * A) - mdp.gamma * p_pi, mdp.rewards.ravel()).reshape(S, A)
        state_matrix = mdp.policy_transitions(pi)
        visitation = np.linalg.solve(np.eye(S) - mdp.gamma * state_matrix.T, mdp.initial)
    except np.linalg.LinAlgError as e:
        raise RuntimeError(f"Bellman system is singular: {e}")
    return ExactValues(q, np.sum(pi * q, axis=1), visitation)


def state_action_weights(policy: TabularSoftmaxPolicy, exact: ExactValues) -> np.ndarray:
    """Normalized discounted visitation over (s, a): rho(s) pi(a|s) / sum rho"""
    rho = exact.visitation / exact.visitation.sum()
    return rho[:, None] * policy.probs


def optimal_baseline(policy: TabularSoftmaxPolicy, exact: ExactValues, state: int) -> float:
    """
    b*(s) = E[u'u Q] / E[u'u] under pi(.|s)

    Raises:
        UndefinedBaselineError: If pi(.|s) is degenerate so that E[u'u] = 0
    """
    weights = policy.probs[state] * policy.score_sq_norm()[state]
    total = weights.sum()
    if total <= 1e-15:
        raise UndefinedBaselineError(f"Optimal baseline undefined at state {state}: policy is deterministic")
    return float(weights @ exact.q[state] / total)


def optimal_baseline_table(policy: TabularSoftmaxPolicy, exact: ExactValues) -> np.ndarray:
    return np.array([optimal_baseline(policy, exact, s) for s in range(exact.v.size)])


def state_gradient_variance(policy: TabularSoftmaxPolicy, exact: ExactValues, state: int, b: float) -> float:
    """Trace of Cov_a[u(s, a) (Q(s, a) - b)] under pi(.|s), exactly"""
    p = policy.probs[state]
    A = p.size
    # Row-s block of the score vectors: e_a - p
    u = np.eye(A) - p[None, :]
    g = u * (exact.q[state] - b)[:, None]
    mean = p @ g
    return float(p @ np.sum((g - mean) ** 2, axis=1))


def control_variate_scalar(policy: TabularSoftmaxPolicy, exact: ExactValues, b_table) -> float:
    """
    a* = Cov(uQ, ub) / Var(ub) for the gradient estimator u (Q - a b)

    The score has zero mean in every state, so both moments reduce to
    weighted sums of ||u||^2 over the state-action distribution.
    """
    b = np.asarray(b_table, dtype=np.float64)[:, None]
    w = state_action_weights(policy, exact) * policy.score_sq_norm()
    denominator = float(np.sum(w * b ** 2))
    if denominator <= 1e-15:
        raise UndefinedBaselineError("Control-variate coefficient undefined for a zero baseline")
    return float(np.sum(w * exact.q * b)) / denominator


def estimator_variance(policy: TabularSoftmaxPolicy, exact: ExactValues, b_table, a: float = 1.0) -> float:
    """Trace of Var[u (Q - a b)] under the normalized visitation"""
    b = np.asarray(b_table, dtype=np.float64)
    weights = state_action_weights(policy, exact)
    S, A = exact.q.shape
    g = np.zeros((S, A, S * A))
    for s in range(S):
        for act in range(A):
            g[s, act] = policy.score(s, act) * (exact.q[s, act] - a * b[s])
    mean = np.einsum("sa,sak->k", weights, g)
    return float(np.einsum("sa,sa->", weights, np.sum((g - mean) ** 2, axis=2)))


def _z_score(diff: float, standard_error: float) -> float:
    if standard_error > 0.0:
        return diff / standard_error
    return 0.0 if abs(diff) < 1e-12 else float("inf")


def verify_proposition1(
    mdp: TabularMDP,
    policy: TabularSoftmaxPolicy,
    b_table,
    n: int,
    samples: int,
    rng: np.random.Generator,
    psi: str = "q",
    exact: Optional[ExactValues] = None,
) -> CheckResult:
    """
    Monte-Carlo mean of the n-step advantage against Q - b for every (s, a)

    With Psi = Q the bootstrap is Q(s_n, a_n), with Psi = V it is V(s_n).
    """
    if psi not in ("q", "v"):
        raise ValueError(f"psi must be 'q' or 'v', got {psi!r}")
    exact = exact or solve_q(mdp, policy)
    b = np.asarray(b_table, dtype=np.float64)
    discounts = mdp.gamma ** np.arange(n)
    z_scores = np.zeros((mdp.n_states, mdp.n_actions))
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            suffixes = mdp.sample_suffixes(policy.probs, np.full(samples, s), np.full(samples, a), n, rng)
            s_n, a_n = suffixes.states[:, n], suffixes.actions[:, n]
            bootstrap = exact.q[s_n, a_n] if psi == "q" else exact.v[s_n]
            estimates = suffixes.rewards @ discounts + mdp.gamma ** n * bootstrap - b[s]
            se = estimates.std(ddof=1) / np.sqrt(samples) if samples > 1 else 0.0
            z_scores[s, a] = _z_score(estimates.mean() - (exact.q[s, a] - b[s]), se)
    worst = float(np.max(np.abs(z_scores)))
    return CheckResult(
        f"proposition1_n{n}_{psi}",
        worst,
        Z_GATE,
        worst < Z_GATE,
        {"z_scores": z_scores.tolist()},
    )


def truncation_horizon(gamma: float, lam: float, eps: float = TRUNCATION_EPS) -> int:
    """Smallest H >= 1 with (gamma * lam)^H < eps"""
    rate = gamma * lam
    if rate <= 0.0:
        return 1
    if rate >= 1.0:
        raise ValueError("Truncation needs gamma * lambda < 1")
    return max(1, int(np.floor(np.log(eps) / np.log(rate))) + 1)


def _suffix_arrays(suffixes: Suffixes, psi_table: np.ndarray, b_table: np.ndarray, gamma: float, lam: float, by_action: bool) -> RolloutArrays:
    states, actions = suffixes.states.T, suffixes.actions.T
    values = psi_table[states, actions] if by_action else psi_table[states]
    return RolloutArrays(
        suffixes.rewards.T,
        values,
        b_table[states[:-1]],
        np.zeros(states.shape[0]),
        gamma,
        lam,
    )


@dataclass
class TabularEstimator:
    """
    An advantage estimator evaluated on sampled suffixes from (s_0, a_0)

    kind is ``uae`` (Psi = Q unless psi='v'), ``gae`` (Psi = b = V) or ``mc``.
    """

    exact: ExactValues
    kind: str = "uae"
    lam: float = 0.95
    baseline: Optional[np.ndarray] = None
    psi: str = "q"

    def __post_init__(self):
        if self.kind not in ("uae", "gae", "mc"):
            raise ValueError(f"Unknown estimator kind '{self.kind}'")
        if self.baseline is None:
            self.baseline = self.exact.v
        self.baseline = np.asarray(self.baseline, dtype=np.float64)

    def horizon(self, gamma: float) -> int:
        return truncation_horizon(gamma, 1.0 if self.kind == "mc" else self.lam)

    def __call__(self, suffixes: Suffixes, gamma: float) -> np.ndarray:
        if self.kind == "gae":
            arrays = _suffix_arrays(suffixes, self.exact.v, self.exact.v, gamma, self.lam, by_action=False)
            return gae(arrays.rewards, arrays.critic_values, arrays.dones, gamma, self.lam)[0]
        by_action = self.psi == "q"
        table = self.exact.q if by_action else self.exact.v
        arrays = _suffix_arrays(suffixes, table, self.baseline, gamma, self.lam, by_action)
        if self.kind == "mc":
            return monte_carlo_advantage(arrays)[0]
        return uae(arrays)[0]


def _sample_state_actions(weights: np.ndarray, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    flat = categorical(np.tile(weights.ravel(), (count, 1)), rng)
    return np.divmod(flat, weights.shape[1])


def theorem1_rhs(mdp: TabularMDP, policy: TabularSoftmaxPolicy, exact: ExactValues, b_table, lam: float, psi: str, horizon: int) -> float:
    """
    Closed form of E[u'u (A_uae^2 - A_gae^2)] under the normalized visitation

    The reducible part is u'u (b^2 - V^2 - 2 Q (b - V)); with Psi = Q the
    irreducible series sum_k gamma^(2k) lam^(2k-2) (1 - lam^2) E[(Q - V)^2 at step k]
    is added.
    """
    b = np.asarray(b_table, dtype=np.float64)
    q, v = exact.q, exact.v
    reducible = b[:, None] ** 2 - v[:, None] ** 2 - 2.0 * q * (b - v)[:, None]
    per_pair = reducible.copy()
    if psi == "q":
        pi = policy.probs
        spread = np.sum(pi * exact.advantage() ** 2, axis=1)
        state_matrix = mdp.policy_transitions(pi)
        gamma = mdp.gamma
        occupancy = mdp.transitions.reshape(-1, mdp.n_states)
        series = np.zeros(occupancy.shape[0])
        for k in range(1, horizon + 1):
            coefficient = gamma ** (2 * k) * lam ** (2 * k - 2) * (1.0 - lam ** 2)
            series += coefficient * occupancy @ spread
            occupancy = occupancy @ state_matrix
        per_pair = per_pair + series.reshape(q.shape)
    weights = state_action_weights(policy, exact)
    return float(np.sum(weights * policy.score_sq_norm() * per_pair))


def verify_theorem1(
    mdp: TabularMDP,
    policy: TabularSoftmaxPolicy,
    b_table,
    lam: float,
    samples: int,
    rng: np.random.Generator,
    psi: str = "q",
    exact: Optional[ExactValues] = None,
    horizon: Optional[int] = None,
) -> CheckResult:
    """
    Paired Monte-Carlo estimate of Var[u A_uae] - Var[u A_gae] against its closed form

    (s, a) is drawn from the normalized discounted visitation; both estimators
    run on the same suffix, truncated where (gamma lam)^H < 1e-8.
    """
    exact = exact or solve_q(mdp, policy)
    horizon = horizon or truncation_horizon(mdp.gamma, lam)
    weights = state_action_weights(policy, exact)
    states, actions = _sample_state_actions(weights, samples, rng)
    suffixes = mdp.sample_suffixes(policy.probs, states, actions, horizon, rng)

    unified = TabularEstimator(exact, "uae", lam, b_table, psi)(suffixes, mdp.gamma)
    generalized = TabularEstimator(exact, "gae", lam)(suffixes, mdp.gamma)
    terms = policy.score_sq_norm()[states, actions] * (unified ** 2 - generalized ** 2)
    lhs = float(terms.mean())
    se = float(terms.std(ddof=1) / np.sqrt(samples))
    rhs = theorem1_rhs(mdp, policy, exact, b_table, lam, psi, horizon)
    tolerance = 3.0 * se + 1e-10
    return CheckResult(
        f"theorem1_{psi}",
        abs(lhs - rhs),
        tolerance,
        abs(lhs - rhs) <= tolerance,
        {"lhs": lhs, "rhs": rhs, "standard_error": se, "horizon": horizon},
    )


def expected_distributional_backup(mdp: TabularMDP, policy: TabularSoftmaxPolicy, means, variances) -> Tuple[np.ndarray, np.ndarray]:
    """One exact sweep in moment form: mean r + gamma P Pi mu, variance gamma^2 P Pi sigma^2"""
    pi = policy.probs
    next_mean = np.einsum("sat,tb,tb->sa", mdp.transitions, pi, means)
    next_var = np.einsum("sat,tb,tb->sa", mdp.transitions, pi, variances)
    return mdp.rewards + mdp.gamma * next_mean, mdp.gamma ** 2 * next_var


def check_distributional_contraction(
    mdp: TabularMDP,
    policy: TabularSoftmaxPolicy,
    pairs: int,
    rng: np.random.Generator,
) -> List[CheckResult]:
    """Sup-norm contraction of the exact backup: mean by gamma, variance by gamma^2"""
    shape = (mdp.n_states, mdp.n_actions)
    mean_ratio, var_ratio = 0.0, 0.0
    for _ in range(pairs):
        mu1, mu2 = rng.normal(0.0, 5.0, shape), rng.normal(0.0, 5.0, shape)
        var1, var2 = rng.uniform(0.0, 4.0, shape), rng.uniform(0.0, 4.0, shape)
        m1, v1 = expected_distributional_backup(mdp, policy, mu1, var1)
        m2, v2 = expected_distributional_backup(mdp, policy, mu2, var2)
        mean_ratio = max(mean_ratio, np.max(np.abs(m1 - m2)) / np.max(np.abs(mu1 - mu2)))
        var_ratio = max(var_ratio, np.max(np.abs(v1 - v2)) / np.max(np.abs(var1 - var2)))
    gamma = mdp.gamma
    return [
        CheckResult("contraction_mean", float(mean_ratio), gamma + 1e-9, mean_ratio <= gamma + 1e-9),
        CheckResult("contraction_variance", float(var_ratio), gamma ** 2 + 1e-9, var_ratio <= gamma ** 2 + 1e-9),
    ]


def distributional_fixed_point(mdp: TabularMDP, policy: TabularSoftmaxPolicy, tol: float = 1e-12, max_sweeps: int = 100_000) -> Tuple[np.ndarray, np.ndarray, int]:
    """Iterate the exact backup from zero until the mean stops moving"""
    shape = (mdp.n_states, mdp.n_actions)
    means, variances = np.zeros(shape), np.ones(shape)
    for sweep in range(1, max_sweeps + 1):
        new_means, new_vars = expected_distributional_backup(mdp, policy, means, variances)
        change = np.max(np.abs(new_means - means))
        means, variances = new_means, new_vars
        if change < tol:
            return means, variances, sweep
    logger.warning("Distributional backup did not settle in %d sweeps", max_sweeps)
    return means, variances, max_sweeps


class VarianceDecomposition(NamedTuple):
    trajectory: float
    state_action: float
    trajectory_se: float


def variance_decomposition(
    source,
    policy: TabularSoftmaxPolicy,
    estimator: TabularEstimator,
    pairs: int,
    rng: np.random.Generator,
) -> VarianceDecomposition:
    """
    Split the gradient-estimator variance into trajectory and state-action parts

    For each pair, (s, a) is drawn from the normalized visitation and two
    independent suffixes give A and A'. The trajectory part averages
    ||u||^2 (A^2 - A A'); the state-action part is mean(||u||^2 A A') minus
    the squared norm of the mean of u (A + A') / 2.

    Raises:
        UnsupportedCapabilityError: If ``source`` cannot continue trajectories from (s, a)
    """
    if not hasattr(source, "sample_suffixes"):
        raise UnsupportedCapabilityError(
            f"{type(source).__name__} cannot replay trajectories from a chosen state-action pair"
        )
    if pairs < 2:
        raise ValueError(f"Need at least 2 pairs, got {pairs}")
    weights = state_action_weights(policy, estimator.exact)
    states, actions = _sample_state_actions(weights, pairs, rng)
    horizon = estimator.horizon(source.gamma)
    first = estimator(source.sample_suffixes(policy.probs, states, actions, horizon, rng), source.gamma)
    second = estimator(source.sample_suffixes(policy.probs, states, actions, horizon, rng), source.gamma)

    sq_norm = policy.score_sq_norm()[states, actions]
    trajectory_terms = sq_norm * (first ** 2 - first * second)

    # Mean of u * (A + A') / 2, accumulated in the (S, A) logit layout
    average = 0.5 * (first + second)
    mean_grad = np.zeros(weights.shape)
    np.add.at(mean_grad, (states, actions), average)
    np.add.at(mean_grad, states, -average[:, None] * policy.probs[states])
    mean_grad /= pairs
    state_action = float(np.mean(sq_norm * first * second) - np.sum(mean_grad ** 2))
    return VarianceDecomposition(
        float(trajectory_terms.mean()),
        state_action,
        float(trajectory_terms.std(ddof=1) / np.sqrt(pairs)),
    )


def variance_of_policy_updates(snapshots: Sequence[np.ndarray]) -> float:
    """E||delta - E[delta]||^2 over consecutive parameter differences"""
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if snapshots.ndim != 2 or snapshots.shape[0] < 2:
        raise ValueError("Need at least 2 parameter snapshots")
    deltas = np.diff(snapshots, axis=0)
    return float(np.mean(np.sum((deltas - deltas.mean(axis=0)) ** 2, axis=1)))


def total_variation(losses: Sequence[float]) -> float:
    """Mean absolute step of the loss series after min-max normalization to [0, 1]"""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 2:
        raise ValueError("Need at least 2 loss values")
    spread = losses.max() - losses.min()
    normalized = np.zeros_like(losses) if spread == 0.0 else (losses - losses.min()) / spread
    return float(np.mean(np.abs(np.diff(normalized))))


def stability_metrics(snapshots: Sequence[np.ndarray], losses: Sequence[float]) -> Tuple[float, float]:
    """(VPU, TV)"""
    return variance_of_policy_updates(snapshots), total_variation(losses)
