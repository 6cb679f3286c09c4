"""
Verification suites: property and oracle checks grouped by component
"""
import logging
from typing import Callable, Dict, List, Tuple

import numpy as np
from scipy.special import betaincinv

from .baseline import ResidualBaseline
from .buffers import TransitionBatch
from .critic import DistributionalCritic
from .distributions import (
    ACTION_EPS,
    ActionBounds,
    GaussianValue,
    beta_log_density,
    gaussian_kl,
    gaussian_kl_grad,
    transform_action,
    untransform_action,
)
from .environments import TabularMDP, fixture_names, load_fixture
from .estimators import RolloutArrays, gae, lambda_return_q, uae
from .funcapprox import gradient_relative_error, numerical_gradient
from .oracle import (
    CheckResult,
    TabularSoftmaxPolicy,
    check_distributional_contraction,
    control_variate_scalar,
    distributional_fixed_point,
    estimator_variance,
    optimal_baseline_table,
    solve_q,
    state_gradient_variance,
    verify_proposition1,
    verify_theorem1,
)
from .policy import BetaPolicy, PolicyBatch, off_policy_surrogate, on_policy_surrogate, positive_advantage

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
SMALL_HIDDEN = (5,)


def _random_rollout(rng: np.random.Generator, max_length: int = 64) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float, float]:
    T = int(rng.integers(1, max_length + 1))
    rewards = rng.normal(size=T)
    values = rng.normal(size=T + 1)
    dones = np.zeros(T + 1)
    dones[T] = float(rng.random() < 0.5)
    return rewards, values, dones, float(rng.uniform(0.0, 0.999)), float(rng.uniform(0.0, 1.0))


def check_gae_specialization(instances: int, rng: np.random.Generator) -> CheckResult:
    """The unified estimator with Q := V and b := V reproduces GAE"""
    worst = 0.0
    for _ in range(instances):
        rewards, values, dones, gamma, lam = _random_rollout(rng)
        unified = uae(RolloutArrays(rewards, values, values[:-1], dones, gamma, lam))
        worst = max(worst, float(np.max(np.abs(unified - gae(rewards, values, dones, gamma, lam)))))
    return CheckResult("gae_specialization", worst, 1e-12, worst <= 1e-12, {"instances": instances})


def check_sarsa_lambda_identity(instances: int, rng: np.random.Generator) -> CheckResult:
    """The unified estimator equals the forward-view lambda-return on Q minus the baseline"""
    worst = 0.0
    for _ in range(instances):
        rewards, q, dones, gamma, lam = _random_rollout(rng, max_length=32)
        b = rng.normal(size=rewards.size)
        unified = uae(RolloutArrays(rewards, q, b, dones, gamma, lam))
        expected = lambda_return_q(rewards, q, dones, gamma, lam) - b
        worst = max(worst, float(np.max(np.abs(unified - expected))))
    return CheckResult("sarsa_lambda_identity", worst, 1e-10, worst <= 1e-10, {"instances": instances})


def _fixture_policies(rng: np.random.Generator) -> List[Tuple[str, TabularMDP, TabularSoftmaxPolicy]]:
    cases = []
    for name in fixture_names():
        mdp = load_fixture(name)
        cases.append((name, mdp, TabularSoftmaxPolicy.random(mdp.n_states, mdp.n_actions, rng)))
    return cases


def estimator_checks(quick: bool, rng: np.random.Generator) -> List[CheckResult]:
    instances = 100 if quick else 1000
    samples = 10_000 if quick else 100_000
    results = [check_gae_specialization(instances, rng), check_sarsa_lambda_identity(instances, rng)]
    for name, mdp, policy in _fixture_policies(rng):
        exact = solve_q(mdp, policy)
        baselines = {"value": exact.v, "perturbed": exact.v + rng.normal(0.0, 1.0, mdp.n_states)}
        for label, b_table in baselines.items():
            for psi in ("q", "v"):
                for n in (1, 2, 3):
                    result = verify_proposition1(mdp, policy, b_table, n, samples, rng, psi=psi, exact=exact)
                    result.name = f"{result.name}_{label}_{name}"
                    results.append(result)
    return results


def check_optimal_baseline(name: str, mdp: TabularMDP, policy: TabularSoftmaxPolicy, grid_points: int = 20_001) -> CheckResult:
    """Closed-form b* against a grid search of the per-state gradient variance"""
    exact = solve_q(mdp, policy)
    closed = optimal_baseline_table(policy, exact)
    worst, dominated = 0.0, True
    for s in range(mdp.n_states):
        grid = np.linspace(exact.q[s].min() - 1.0, exact.q[s].max() + 1.0, grid_points)
        variances = np.array([state_gradient_variance(policy, exact, s, b) for b in grid])
        worst = max(worst, abs(float(grid[np.argmin(variances)]) - closed[s]))
        at_optimum = state_gradient_variance(policy, exact, s, closed[s])
        slack = 1e-12 * max(1.0, at_optimum)
        dominated &= at_optimum <= state_gradient_variance(policy, exact, s, exact.v[s]) + slack
        dominated &= at_optimum <= state_gradient_variance(policy, exact, s, 0.0) + slack
    return CheckResult(
        f"optimal_baseline_{name}",
        worst,
        1e-3,
        worst <= 1e-3 and bool(dominated),
        {"baseline": closed.tolist(), "dominates_value_and_zero": bool(dominated)},
    )


def check_control_variate(name: str, mdp: TabularMDP, policy: TabularSoftmaxPolicy) -> CheckResult:
    """a* = Cov/Var minimizes the variance of u (Q - a V) over a grid of coefficients"""
    exact = solve_q(mdp, policy)
    a_star = control_variate_scalar(policy, exact, exact.v)
    best = estimator_variance(policy, exact, exact.v, a_star)
    others = [estimator_variance(policy, exact, exact.v, a) for a in np.linspace(a_star - 1.0, a_star + 1.0, 41)]
    gap = best - min(others)
    tolerance = 1e-10 * max(1.0, abs(best))
    return CheckResult(f"control_variate_{name}", gap, tolerance, gap <= tolerance, {"a_star": a_star})


def _small_agent(rng: np.random.Generator, obs_dim: int = 3, action_dim: int = 2):
    policy = BetaPolicy(obs_dim, action_dim, rng, SMALL_HIDDEN)
    critic = DistributionalCritic(obs_dim, action_dim, rng, SMALL_HIDDEN)
    baseline = ResidualBaseline(obs_dim, action_dim, rng, SMALL_HIDDEN, m_actions=4)
    return policy, critic, baseline


def _gradient_result(name: str, analytic: np.ndarray, loss_fn: Callable[[], float], params) -> CheckResult:
    error = gradient_relative_error(analytic, numerical_gradient(loss_fn, params))
    return CheckResult(name, error, GRADIENT_TOLERANCE, error < GRADIENT_TOLERANCE, {"n_params": len(params)})


def check_baseline_gradient(rng: np.random.Generator) -> CheckResult:
    policy, critic, baseline = _small_agent(rng)
    states = rng.normal(size=(8, 3))
    xs, _ = policy.sample(states, rng)
    seed = int(rng.integers(2 ** 31))
    _, analytic = baseline.loss_and_grad(states, xs, critic, policy, np.random.default_rng(seed))
    return _gradient_result(
        "baseline_gradient",
        analytic,
        lambda: baseline.loss_and_grad(states, xs, critic, policy, np.random.default_rng(seed))[0],
        baseline.params,
    )


def baseline_checks(quick: bool, rng: np.random.Generator) -> List[CheckResult]:
    results = []
    for name, mdp, policy in _fixture_policies(rng):
        results.append(check_optimal_baseline(name, mdp, policy))
        results.append(check_control_variate(name, mdp, policy))
    results.append(check_baseline_gradient(rng))
    return results


def check_kl_mse_equivalence(pairs: int, rng: np.random.Generator) -> CheckResult:
    """With equal stddevs the KL is the scaled squared error, and so is its mean gradient"""
    m1, m2 = rng.normal(0.0, 3.0, pairs), rng.normal(0.0, 3.0, pairs)
    sigma = rng.uniform(0.1, 2.0, pairs)
    target, model = GaussianValue(m1, sigma), GaussianValue(m2, sigma)
    squared = (m1 - m2) ** 2 / (2.0 * sigma ** 2)
    d_mean, _ = gaussian_kl_grad(target, model)
    value_error = np.abs(gaussian_kl(target, model) - squared) / np.maximum(1.0, squared)
    grad_error = np.abs(d_mean - (m2 - m1) / sigma ** 2)
    worst = float(max(value_error.max(), grad_error.max()))
    return CheckResult("kl_mse_equivalence", worst, 1e-12, worst <= 1e-12, {"pairs": pairs})


def check_critic_kl_gradient(rng: np.random.Generator) -> CheckResult:
    policy, critic, _ = _small_agent(rng)
    n = 8
    states, next_states = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    xs, _ = policy.sample(states, rng)
    next_xs, _ = policy.sample(next_states, rng)
    critic.target.values += rng.normal(0.0, 0.1, len(critic.target))
    batch = TransitionBatch(states, xs, rng.normal(size=n), next_states, (rng.random(n) < 0.25).astype(float))
    _, analytic = critic.kl_loss_and_grad(batch, next_xs, 0.9)
    return _gradient_result(
        "critic_kl_gradient",
        analytic,
        lambda: critic.kl_loss_and_grad(batch, next_xs, 0.9)[0],
        critic.params,
    )


def check_critic_cross_entropy_gradient(rng: np.random.Generator) -> CheckResult:
    policy, critic, _ = _small_agent(rng)
    states = rng.normal(size=(8, 3))
    xs, _ = policy.sample(states, rng)
    targets = rng.normal(size=(8, 6))
    _, analytic = critic.cross_entropy_loss_and_grad(states, xs, targets)
    return _gradient_result(
        "critic_cross_entropy_gradient",
        analytic,
        lambda: critic.cross_entropy_loss_and_grad(states, xs, targets)[0],
        critic.params,
    )


def check_distributional_fixed_point(name: str, mdp: TabularMDP, policy: TabularSoftmaxPolicy) -> CheckResult:
    means, _, sweeps = distributional_fixed_point(mdp, policy)
    error = float(np.max(np.abs(means - solve_q(mdp, policy).q)))
    return CheckResult(f"distributional_fixed_point_{name}", error, 1e-6, error <= 1e-6, {"sweeps": sweeps})


def critic_checks(quick: bool, rng: np.random.Generator) -> List[CheckResult]:
    results = [
        check_kl_mse_equivalence(1_000 if quick else 10_000, rng),
        check_critic_kl_gradient(rng),
        check_critic_cross_entropy_gradient(rng),
    ]
    for name, mdp, policy in _fixture_policies(rng):
        results.append(check_distributional_fixed_point(name, mdp, policy))
    return results


def check_surrogate_gradient(learner: str, rng: np.random.Generator) -> CheckResult:
    policy, _, _ = _small_agent(rng)
    states = rng.normal(size=(10, 3))
    xs, log_probs = policy.sample(states, rng)
    batch = PolicyBatch(states, xs, log_probs + rng.normal(0.0, 0.05, log_probs.shape), rng.normal(size=10))
    _, analytic = on_policy_surrogate(learner, policy, batch)
    return _gradient_result(
        f"surrogate_gradient_{learner}",
        analytic,
        lambda: on_policy_surrogate(learner, policy, batch)[0],
        policy.params,
    )


def check_self_annealing(rng: np.random.Generator) -> CheckResult:
    """A critic that never exceeds the baseline and alpha = 0 give an exactly zero off-policy gradient"""
    policy, critic, baseline = _small_agent(rng)
    critic.params.values[:] = 0.0
    _, bias = critic.spec.layer_slices()[-1]
    critic.params.values[bias.start] = -10.0
    baseline.params.values[:] = 0.0
    result = off_policy_surrogate(policy, critic, baseline, rng.normal(size=(32, 3)), 0.0, rng)
    worst = float(np.max(np.abs(result.grad)))
    return CheckResult("self_annealing", worst, 0.0, worst == 0.0)


def check_offpolicy_gradient(samples: int, rng: np.random.Generator, h: float = 1e-4) -> CheckResult:
    """
    Score-function gradient of E[(Q - b)^+ - alpha log pi] against a pathwise
    finite difference with common random numbers, along one random direction

    The pathwise objective draws x = F^-1(u) through the Beta quantile function
    with the uniforms u held fixed. Passes on a relative error of 1e-2 or when
    the gap is inside four combined Monte-Carlo standard errors.
    """
    policy, critic, _ = _small_agent(rng, obs_dim=2, action_dim=1)
    alpha = 0.03
    states = np.repeat(rng.normal(size=(1, 2)), samples, axis=0)
    theta = policy.params.values.copy()
    direction = rng.normal(size=theta.size)
    direction /= np.linalg.norm(direction)

    xs, log_probs = policy.sample(states, rng)
    q = critic.mean_value(states, xs)
    b = float(np.median(q))
    weights = positive_advantage(q, b) - alpha * log_probs
    score = policy.score_gradient(states, xs, weights / samples) @ direction
    directional_log = (
        policy.log_prob(states, xs, theta + h * direction) - policy.log_prob(states, xs, theta - h * direction)
    ) / (2.0 * h)
    score_se = float(np.std(weights * directional_log, ddof=1) / np.sqrt(samples))

    uniforms = rng.random((samples, 1))

    def per_sample(values: np.ndarray) -> np.ndarray:
        shapes = policy.shapes(states, values)
        x = np.clip(betaincinv(shapes.alpha, shapes.beta, uniforms), ACTION_EPS, 1.0 - ACTION_EPS)
        return positive_advantage(critic.mean_value(states, x), b) - alpha * beta_log_density(x, shapes)

    pathwise = (per_sample(theta + h * direction) - per_sample(theta - h * direction)) / (2.0 * h)
    finite_difference = float(pathwise.mean())
    pathwise_se = float(pathwise.std(ddof=1) / np.sqrt(samples))

    relative = abs(score - finite_difference) / max(abs(finite_difference), 1e-8)
    combined_se = float(np.hypot(score_se, pathwise_se))
    passed = relative < 1e-2 or abs(score - finite_difference) <= 4.0 * combined_se
    return CheckResult(
        "offpolicy_gradient_crn",
        relative,
        1e-2,
        passed,
        {"score_function": score, "finite_difference": finite_difference, "standard_error": combined_se},
    )


def check_bound_invariance(cases: int, rng: np.random.Generator, tolerance: float = 1e-9) -> CheckResult:
    """
    Log-likelihood differences between two policies do not depend on the action bounds

    Actions go out through ``transform_action`` and come back through
    ``untransform_action``; the bounded log-likelihoods are scored on the
    recovered unit sample plus the correction. The statistic also covers the
    round trip and the correction against -sum(log(upper - lower)).
    """
    dim = 2
    lower = rng.uniform(-5.0, 0.0, dim)
    bounds = ActionBounds(lower, lower + rng.uniform(0.1, 10.0, dim))
    x = rng.uniform(0.05, 0.95, (cases, dim))
    first = BetaPolicy(3, dim, rng, SMALL_HIDDEN)
    second = BetaPolicy(3, dim, rng, SMALL_HIDDEN)
    states = rng.normal(size=(cases, 3))

    actions, correction = transform_action(x, bounds)
    recovered = untransform_action(actions, bounds)
    unit = first.log_prob(states, x) - second.log_prob(states, x)
    bounded = (first.log_prob(states, recovered) + correction) - (second.log_prob(states, recovered) + correction)

    round_trip = float(np.max(np.abs(recovered - x)))
    correction_error = abs(correction + float(np.sum(np.log(bounds.upper - bounds.lower))))
    in_box = bool(np.all(actions >= bounds.lower) and np.all(actions <= bounds.upper))
    worst = max(float(np.max(np.abs(unit - bounded))), round_trip, correction_error)
    return CheckResult(
        "bound_invariance",
        worst,
        tolerance,
        worst <= tolerance and in_box,
        {"cases": cases, "round_trip": round_trip, "correction_error": correction_error, "in_box": in_box},
    )


def policy_checks(quick: bool, rng: np.random.Generator) -> List[CheckResult]:
    results = [check_surrogate_gradient(learner, rng) for learner in ("a2c", "trpo", "ppo")]
    results.append(check_self_annealing(rng))
    results.append(check_offpolicy_gradient(10_000 if quick else 100_000, rng))
    results.append(check_bound_invariance(1_000 if quick else 10_000, rng))
    return results


def theorem_checks(quick: bool, rng: np.random.Generator) -> List[CheckResult]:
    samples = 20_000 if quick else 200_000
    mdp = load_fixture("chain3")
    policy = TabularSoftmaxPolicy.random(mdp.n_states, mdp.n_actions, rng)
    exact = solve_q(mdp, policy)
    b_table = exact.v + rng.normal(0.0, 0.5, mdp.n_states)
    results = [
        verify_theorem1(mdp, policy, b_table, 0.95, samples, rng, psi="v", exact=exact),
        verify_theorem1(mdp, policy, b_table, 0.95, samples, rng, psi="q", exact=exact),
    ]
    for name, fixture, fixture_policy in _fixture_policies(rng):
        for result in check_distributional_contraction(fixture, fixture_policy, 100, rng):
            result.name = f"{result.name}_{name}"
            results.append(result)
    return results


SUITES: Dict[str, Callable[[bool, np.random.Generator], List[CheckResult]]] = {
    "estimators": estimator_checks,
    "baseline": baseline_checks,
    "critic": critic_checks,
    "policy": policy_checks,
    "theorems": theorem_checks,
}
SUITE_NAMES = tuple(SUITES) + ("all",)


def run_suite(name: str, quick: bool = False, seed: int = 0) -> List[CheckResult]:
    """
    Run one named suite, or every suite for ``all``

    Raises:
        ValueError: If the suite name is unknown
    """
    if name not in SUITE_NAMES:
        raise ValueError(f"Unknown suite '{name}'. Choose from: {', '.join(SUITE_NAMES)}")
    names = list(SUITES) if name == "all" else [name]
    results: List[CheckResult] = []
    for suite in names:
        rng = np.random.default_rng([seed, list(SUITES).index(suite)])
        logger.info("Running %s checks", suite)
        results.extend(SUITES[suite](quick, rng))
    return results


def format_report(results: List[CheckResult]) -> str:
    lines = [result.to_line() for result in results]
    passed = sum(result.passed for result in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
