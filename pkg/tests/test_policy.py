import pytest
import numpy as np
from unittest.mock import patch

from dpo_lab.errors import NonFiniteError
from dpo_lab.funcapprox import gradient_relative_error, numerical_gradient
from dpo_lab.policy import (
    BetaPolicy,
    PolicyBatch,
    PolicyConfig,
    RewardScaler,
    RunningNormalizer,
    combined_update,
    conjugate_gradient,
    mean_kl,
    normalize_advantages,
    off_policy_surrogate,
    on_policy_surrogate,
    positive_advantage,
    trpo_step,
)
from tests.conftest import SMALL_HIDDEN


class ConstantValue:
    """Critic or baseline that returns the same value for every state and action"""

    def __init__(self, value):
        self.value = value

    def mean_value(self, states, xs):
        return np.full(len(states), self.value)

    def baseline_value(self, states, critic, policy, rng, m=None):
        return np.full(len(states), self.value)


@pytest.fixture
def batch(small_agent, rng):
    """On-policy minibatch whose stored log-likelihoods come from the current policy"""
    policy, _, _ = small_agent
    states = rng.normal(size=(8, 3))
    xs, log_probs = policy.sample(states, rng)
    return PolicyBatch(states, xs, log_probs, rng.normal(size=8))


class TestBetaPolicy:
    """Test cases for the Beta policy network"""

    def test_sample_inside_unit_interval(self, small_agent, rng):
        """Test that samples lie strictly inside (0, 1) and log-likelihoods match"""
        policy, _, _ = small_agent
        states = rng.normal(size=(50, 3))
        xs, log_probs = policy.sample(states, rng)
        assert xs.shape == (50, 2)
        assert np.all((xs > 0.0) & (xs < 1.0))
        np.testing.assert_allclose(log_probs, policy.log_prob(states, xs))

    def test_shapes_at_least_one(self, small_agent, rng):
        """Test that both Beta shapes are at least one"""
        policy, _, _ = small_agent
        shapes = policy.shapes(10.0 * rng.normal(size=(20, 3)))
        assert np.all(shapes.alpha >= 1.0) and np.all(shapes.beta >= 1.0)

    def test_score_gradient(self, small_agent, rng):
        """Test the weighted score gradient against finite differences"""
        policy, _, _ = small_agent
        states, xs, w = rng.normal(size=(6, 3)), rng.uniform(0.05, 0.95, (6, 2)), rng.normal(size=6)
        analytic = policy.score_gradient(states, xs, w)
        numeric = numerical_gradient(lambda: float(np.sum(w * policy.log_prob(states, xs))), policy.params)
        assert gradient_relative_error(analytic, numeric) < 1e-4

    def test_score_sq_norms(self, small_agent, rng):
        """Test per-row squared score norms against one gradient per row"""
        policy, _, _ = small_agent
        states, xs = rng.normal(size=(4, 3)), rng.uniform(0.05, 0.95, (4, 2))
        expected = [np.sum(policy.score_gradient(states[i:i + 1], xs[i:i + 1], [1.0]) ** 2) for i in range(4)]
        np.testing.assert_allclose(policy.score_sq_norms(states, xs), expected, rtol=1e-10)

    def test_fisher_matches_kl_curvature(self, small_agent, rng):
        """Test that v'Fv equals the second derivative of the mean KL along v"""
        policy, _, _ = small_agent
        states = rng.normal(size=(10, 3))
        v = rng.normal(size=len(policy.params))
        eps = 1e-3
        old = policy.shapes(states)
        curvature = 2.0 * mean_kl(policy, states, old, policy.params.values + eps * v) / eps ** 2
        assert float(v @ policy.fisher_vector_product(states, v)) == pytest.approx(curvature, rel=1e-2)

    def test_fisher_damping(self, small_agent, rng):
        """Test that damping adds a multiple of the vector"""
        policy, _, _ = small_agent
        states, v = rng.normal(size=(5, 3)), rng.normal(size=len(policy.params))
        np.testing.assert_allclose(
            policy.fisher_vector_product(states, v, 0.5), policy.fisher_vector_product(states, v) + 0.5 * v
        )


class TestSurrogates:
    """Test cases for the on- and off-policy surrogates"""

    @pytest.mark.parametrize("learner", ["a2c", "trpo", "ppo"])
    def test_on_policy_gradient(self, small_agent, batch, learner):
        """Test each learner's surrogate gradient against finite differences"""
        policy, _, _ = small_agent
        _, analytic = on_policy_surrogate(learner, policy, batch)
        numeric = numerical_gradient(lambda: on_policy_surrogate(learner, policy, batch)[0], policy.params)
        assert gradient_relative_error(analytic, numeric) < 1e-4

    def test_ppo_clipped_samples_carry_no_gradient(self, small_agent, batch):
        """Test that ratios above 1 + clip with positive advantages contribute nothing"""
        policy, _, _ = small_agent
        clipped = batch._replace(log_probs=batch.log_probs - 1.0, advantages=np.abs(batch.advantages) + 0.1)
        _, grad = on_policy_surrogate("ppo", policy, clipped, clip=0.2)
        np.testing.assert_array_equal(grad, 0.0)

    def test_ratio_learners_need_log_probs(self, small_agent, batch):
        """Test that ppo refuses a batch without stored log-likelihoods"""
        policy, _, _ = small_agent
        with pytest.raises(ValueError, match="stored log-likelihoods"):
            on_policy_surrogate("ppo", policy, batch._replace(log_probs=None))

    def test_unknown_learner(self, small_agent, batch):
        """Test that an unknown learner is rejected"""
        policy, _, _ = small_agent
        with pytest.raises(ValueError, match="Unknown learner"):
            on_policy_surrogate("sac", policy, batch)

    def test_off_policy_term(self, small_agent, rng):
        """Test the off-policy result's shapes and the non-negative advantage"""
        policy, critic, baseline = small_agent
        result = off_policy_surrogate(policy, critic, baseline, rng.normal(size=(6, 3)), 0.03, rng)
        assert result.grad.shape == (len(policy.params),)
        assert result.mean_pos_adv >= 0.0
        assert np.isfinite(result.loss)

    def test_positive_advantage(self):
        """Test the hinge on Q - b"""
        np.testing.assert_array_equal(positive_advantage([1.0, -2.0, 0.5], [0.5, 0.0, 0.5]), [0.5, 0.0, 0.0])


class TestCombinedUpdate:
    """Test cases for policy updates"""

    def test_pure_on_policy_ignores_replay(self, small_agent, batch):
        """Test that omega = 1 needs no critic, baseline or replay"""
        policy, _, _ = small_agent
        before = policy.params.values.copy()
        stats = combined_update(PolicyConfig(learner="ppo", omega=1.0), policy, batch)
        assert not np.array_equal(policy.params.values, before)
        assert np.isnan(stats.loss_off)

    def test_pure_on_policy_matches_plain_step(self, rng):
        """Test that omega = 1 with replay arguments gives the same step as without them"""
        first = BetaPolicy(3, 2, np.random.default_rng(4), SMALL_HIDDEN)
        second = BetaPolicy(3, 2, np.random.default_rng(4), SMALL_HIDDEN)
        states = rng.normal(size=(8, 3))
        xs, log_probs = first.sample(states, rng)
        batch = PolicyBatch(states, xs, log_probs, rng.normal(size=8))
        config = PolicyConfig(learner="ppo", omega=1.0)
        combined_update(config, first, batch)
        combined_update(config, second, batch, critic=object(), baseline=object(), replay_states=states, rng=rng)
        np.testing.assert_array_equal(first.params.values, second.params.values)

    def test_mixed_update_needs_replay(self, small_agent, batch):
        """Test that omega < 1 without replay states raises"""
        policy, _, _ = small_agent
        with pytest.raises(ValueError, match="replay states"):
            combined_update(PolicyConfig(omega=0.5), policy, batch)

    def test_mixed_update(self, small_agent, batch, rng):
        """Test that omega < 1 reports both loss terms"""
        policy, critic, baseline = small_agent
        stats = combined_update(
            PolicyConfig(learner="a2c", omega=0.5), policy, batch, critic, baseline, rng.normal(size=(6, 3)), rng
        )
        assert np.isfinite(stats.loss_on) and np.isfinite(stats.loss_off)
        assert stats.mean_pos_adv >= 0.0

    def test_mixed_gradient_is_weighted_sum(self, small_agent, batch, rng):
        """Test that the applied gradient is omega * on-policy + (1 - omega) * off-policy"""
        policy, critic, baseline = small_agent
        replay_states = rng.normal(size=(6, 3))
        config = PolicyConfig(learner="a2c", omega=0.3, alpha=0.1)
        _, grad_on = on_policy_surrogate("a2c", policy, batch)
        grad_off = off_policy_surrogate(policy, critic, baseline, replay_states, 0.1, np.random.default_rng(7)).grad
        applied = []
        with patch("dpo_lab.policy._apply", side_effect=lambda p, grad, clip: applied.append(grad) or 0.0):
            combined_update(config, policy, batch, critic, baseline, replay_states, np.random.default_rng(7))
        assert len(applied) == 1
        np.testing.assert_allclose(applied[0], 0.3 * grad_on + 0.7 * grad_off, rtol=1e-12, atol=1e-15)

    def test_entropy_ascent_without_positive_advantage(self, rng):
        """Test that alpha > 0 with a pessimistic critic drives the Beta shapes toward one"""
        policy = BetaPolicy(3, 2, np.random.default_rng(5), SMALL_HIDDEN, learning_rate=1e-2)
        critic, baseline = ConstantValue(0.0), ConstantValue(1.0)
        states = rng.normal(size=(256, 3))
        batch = PolicyBatch(states[:8], *policy.sample(states[:8], rng), np.zeros(8))
        config = PolicyConfig(learner="a2c", omega=0.0, alpha=0.5)

        def excess(shapes):
            return float(np.mean(shapes.alpha - 1.0 + shapes.beta - 1.0))

        before, entropy_before = excess(policy.shapes(states)), float(np.mean(policy.entropy(states)))
        for _ in range(400):
            stats = combined_update(config, policy, batch, critic, baseline, states, rng)
            assert stats.mean_pos_adv == 0.0
        assert excess(policy.shapes(states)) < 0.7 * before
        assert float(np.mean(policy.entropy(states))) > entropy_before

    def test_non_finite_gradient(self, small_agent, batch):
        """Test that NaN advantages stop the update before the optimizer runs"""
        policy, _, _ = small_agent
        before = policy.params.values.copy()
        with pytest.raises(NonFiniteError):
            combined_update(PolicyConfig(learner="a2c", omega=1.0), policy, batch._replace(advantages=np.full(8, np.nan)))
        np.testing.assert_array_equal(policy.params.values, before)

    def test_trpo_respects_kl_limit(self, small_agent, batch):
        """Test that the accepted natural-gradient step stays inside the trust region"""
        policy, _, _ = small_agent
        old = policy.shapes(batch.states)
        config = PolicyConfig(learner="trpo", omega=1.0, max_kl=0.01)
        stats = trpo_step(config, policy, batch)
        assert mean_kl(policy, batch.states, old, policy.params.values) <= 0.01 + 1e-12
        assert 0.0 <= stats.step_fraction <= 1.0

    def test_policy_config_validation(self):
        """Test that out-of-range policy settings are rejected"""
        with pytest.raises(ValueError, match="omega"):
            PolicyConfig(omega=1.5)
        with pytest.raises(ValueError, match="alpha"):
            PolicyConfig(alpha=-1.0)
        with pytest.raises(ValueError, match="Unknown learner"):
            PolicyConfig(learner="ddpg")


class TestHelpers:
    """Test cases for the numerical helpers used by the learners"""

    def test_conjugate_gradient(self, rng):
        """Test that CG solves a small positive definite system"""
        m = rng.normal(size=(5, 5))
        A = m @ m.T + 5.0 * np.eye(5)
        b = rng.normal(size=5)
        x, converged = conjugate_gradient(lambda v: A @ v, b, iters=50, tol=1e-12)
        assert converged
        np.testing.assert_allclose(A @ x, b, atol=1e-8)

    def test_trpo_direction_solves_fisher_system(self, small_agent, batch):
        """Test that the natural-gradient direction equals the dense solve of F d = g"""
        policy, _, _ = small_agent
        config = PolicyConfig(learner="trpo", omega=1.0, max_kl=0.01, cg_iters=500, cg_tol=1e-10)
        _, loss_grad = on_policy_surrogate("trpo", policy, batch)
        g = -loss_grad
        n = policy.params.values.size
        fisher = np.column_stack(
            [policy.fisher_vector_product(batch.states, e, config.damping) for e in np.eye(n)]
        )
        expected = np.linalg.solve(fisher, g)
        directions = []

        def record(matvec, b, iters, tol):
            direction, converged = conjugate_gradient(matvec, b, iters, tol)
            directions.append(direction)
            return direction, converged

        before = policy.params.values.copy()
        with patch("dpo_lab.policy.conjugate_gradient", side_effect=record):
            stats = trpo_step(config, policy, batch)
        assert len(directions) == 1
        scale = np.linalg.norm(expected)
        np.testing.assert_allclose(directions[0], expected, rtol=1e-6, atol=1e-7 * scale)
        step = stats.step_fraction * np.sqrt(2.0 * config.max_kl / (expected @ fisher @ expected)) * expected
        np.testing.assert_allclose(policy.params.values - before, step, rtol=1e-5, atol=1e-8 * np.linalg.norm(step) + 1e-15)

    def test_normalize_advantages(self, rng):
        """Test zero mean and unit standard deviation"""
        normalized = normalize_advantages(3.0 + 2.0 * rng.normal(size=100))
        assert normalized.mean() == pytest.approx(0.0, abs=1e-12)
        assert normalized.std() == pytest.approx(1.0, rel=1e-6)

    def test_normalize_needs_two_entries(self):
        """Test that a single advantage cannot be normalized"""
        with pytest.raises(ValueError, match="at least 2"):
            normalize_advantages([1.0])

    def test_running_normalizer_matches_batch_moments(self, rng):
        """Test that chunked updates reproduce the moments of all the data"""
        data = rng.normal(2.0, 3.0, size=(300, 2))
        normalizer = RunningNormalizer(2)
        for chunk in np.array_split(data, 7):
            normalizer.update(chunk)
        np.testing.assert_allclose(normalizer.mean, data.mean(axis=0))
        np.testing.assert_allclose(normalizer.var, data.var(axis=0))
        restored = RunningNormalizer.from_dict(normalizer.state_dict())
        np.testing.assert_array_equal(restored.normalize(data[:3]), normalizer.normalize(data[:3]))

    def test_running_normalizer_clips(self):
        """Test that standardized values are clipped"""
        normalizer = RunningNormalizer(1, clip=2.0)
        normalizer.update(np.array([[0.0], [1.0], [2.0]]))
        assert normalizer.normalize([100.0])[0] == 2.0

    def test_reward_scaler(self):
        """Test that rewards pass unscaled until two returns are seen"""
        scaler = RewardScaler(0.9)
        scaler.update(1.0, False)
        assert scaler.std == 1.0
        scaler.update(3.0, True)
        assert scaler.std == pytest.approx(np.std([1.0, 3.9]), rel=1e-6)
        assert scaler.running_return == 0.0
        np.testing.assert_allclose(scaler.scale([2.0]), [2.0 / scaler.std])
