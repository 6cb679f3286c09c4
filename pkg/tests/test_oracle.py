import pytest
import numpy as np

from dpo_lab.environments import load_fixture
from dpo_lab.errors import UndefinedBaselineError, UnsupportedCapabilityError
from dpo_lab.oracle import (
    CheckResult,
    TabularEstimator,
    TabularSoftmaxPolicy,
    check_distributional_contraction,
    control_variate_scalar,
    distributional_fixed_point,
    estimator_variance,
    optimal_baseline,
    optimal_baseline_table,
    solve_q,
    stability_metrics,
    state_gradient_variance,
    total_variation,
    truncation_horizon,
    variance_decomposition,
    variance_of_policy_updates,
    verify_proposition1,
    verify_theorem1,
)


class TestTabularSoftmaxPolicy:
    """Test cases for tabular softmax policies"""

    def test_probabilities(self, chain3_policy):
        """Test that rows are probability vectors"""
        np.testing.assert_allclose(chain3_policy.probs.sum(axis=1), 1.0)

    def test_score_norms(self, chain3_policy):
        """Test the closed-form squared score norm against explicit score vectors"""
        table = chain3_policy.score_sq_norm()
        for s in range(3):
            for a in range(2):
                assert table[s, a] == pytest.approx(np.sum(chain3_policy.score(s, a) ** 2))

    def test_logits_must_be_a_table(self):
        """Test that a flat logit vector is rejected"""
        with pytest.raises(ValueError, match="table"):
            TabularSoftmaxPolicy(np.zeros(3))


class TestExactValues:
    """Test cases for exact policy evaluation"""

    def test_bellman_equation(self, chain3, chain3_policy):
        """Test that Q = r + gamma P V"""
        exact = solve_q(chain3, chain3_policy)
        np.testing.assert_allclose(exact.q, chain3.rewards + chain3.gamma * chain3.transitions @ exact.v, atol=1e-12)

    def test_visitation_mass(self, chain3, chain3_policy):
        """Test that the discounted visitation sums to 1 / (1 - gamma)"""
        exact = solve_q(chain3, chain3_policy)
        assert exact.visitation.sum() == pytest.approx(1.0 / (1.0 - chain3.gamma))

    def test_policy_shape_checked(self, chain3):
        """Test that a policy for another MDP is rejected"""
        with pytest.raises(ValueError, match="MDP needs"):
            solve_q(chain3, TabularSoftmaxPolicy.uniform(4, 2))


class TestBaselines:
    """Test cases for the optimal baseline and the control variate"""

    def test_optimal_baseline_minimizes_state_variance(self, chain3, chain3_policy):
        """Test that b* beats nearby baselines, V and zero in every state"""
        exact = solve_q(chain3, chain3_policy)
        for s in range(3):
            best = optimal_baseline(chain3_policy, exact, s)
            variance = state_gradient_variance(chain3_policy, exact, s, best)
            for other in (best - 0.1, best + 0.1, exact.v[s], 0.0):
                assert variance <= state_gradient_variance(chain3_policy, exact, s, other) + 1e-12

    def test_optimal_baseline_of_uniform_policy_is_value(self, chain3):
        """Test that equal score norms under a uniform policy make b* = V"""
        policy = TabularSoftmaxPolicy.uniform(3, 2)
        exact = solve_q(chain3, policy)
        np.testing.assert_allclose(optimal_baseline_table(policy, exact), exact.v, atol=1e-12)

    def test_deterministic_policy(self, chain3):
        """Test that the optimal baseline is undefined for a deterministic state"""
        policy = TabularSoftmaxPolicy(np.array([[800.0, -800.0], [0.0, 0.0], [0.0, 0.0]]))
        exact = solve_q(chain3, policy)
        with pytest.raises(UndefinedBaselineError):
            optimal_baseline(policy, exact, 0)

    def test_control_variate_minimizes_variance(self, chain3, chain3_policy, rng):
        """Test that a* gives a smaller estimator variance than nearby scalars"""
        exact = solve_q(chain3, chain3_policy)
        b = exact.v + rng.normal(0.0, 0.5, size=3)
        a_star = control_variate_scalar(chain3_policy, exact, b)
        best = estimator_variance(chain3_policy, exact, b, a_star)
        for a in (a_star - 0.05, a_star + 0.05, 1.0, 0.0):
            assert best <= estimator_variance(chain3_policy, exact, b, a) + 1e-10

    def test_control_variate_zero_baseline(self, chain3, chain3_policy):
        """Test that a zero baseline leaves the coefficient undefined"""
        exact = solve_q(chain3, chain3_policy)
        with pytest.raises(UndefinedBaselineError):
            control_variate_scalar(chain3_policy, exact, np.zeros(3))


class TestStatisticalChecks:
    """Test cases for the Monte-Carlo checks against exact values"""

    @pytest.mark.parametrize("n", [1, 2, 3])
    @pytest.mark.parametrize("psi", ["q", "v"])
    @pytest.mark.parametrize("perturb", [0.0, 1.0])
    def test_n_step_advantage_is_unbiased(self, chain3, chain3_policy, rng, n, psi, perturb):
        """Test that the n-step advantage averages to Q - b for either bootstrap and any state baseline"""
        exact = solve_q(chain3, chain3_policy)
        b = exact.v + perturb * rng.normal(size=3)
        result = verify_proposition1(chain3, chain3_policy, b, n, 5_000, rng, psi=psi, exact=exact)
        assert result.passed, result.to_line()
        assert result.name == f"proposition1_n{n}_{psi}"

    def test_n_step_check_rejects_wrong_target(self, chain3, chain3_policy, rng):
        """Test that estimates compared against a shifted target fail the z-gate"""
        exact = solve_q(chain3, chain3_policy)
        shifted = exact._replace(q=exact.q + 0.5)
        result = verify_proposition1(chain3, chain3_policy, exact.v, 1, 5_000, rng, psi="v", exact=shifted)
        assert not result.passed

    def test_unknown_bootstrap(self, chain3, chain3_policy, rng):
        """Test that a bootstrap other than q or v is rejected"""
        with pytest.raises(ValueError, match="psi"):
            verify_proposition1(chain3, chain3_policy, np.zeros(3), 1, 10, rng, psi="w")

    def test_variance_gap_closed_form(self, chain3, chain3_policy, rng):
        """Test the paired variance difference against its closed form"""
        exact = solve_q(chain3, chain3_policy)
        b = exact.v + rng.normal(0.0, 0.5, size=3)
        result = verify_theorem1(chain3, chain3_policy, b, 0.9, 20_000, rng, psi="v", exact=exact)
        assert result.passed, result.details

    def test_truncation_horizon(self):
        """Test the smallest horizon below the tolerance"""
        assert truncation_horizon(0.5, 1.0, eps=1e-2) == 7
        assert truncation_horizon(0.9, 0.0) == 1
        with pytest.raises(ValueError):
            truncation_horizon(1.0, 1.0)

    def test_estimator_kinds(self, chain3, chain3_policy):
        """Test that unknown estimator kinds are rejected"""
        exact = solve_q(chain3, chain3_policy)
        with pytest.raises(ValueError, match="Unknown estimator kind"):
            TabularEstimator(exact, "td")


class TestDistributionalBackup:
    """Test cases for the exact distributional backup"""

    @pytest.mark.parametrize("name", ["chain3", "grid4", "mixed3x3"])
    def test_contraction(self, name, rng):
        """Test the mean and variance contraction factors on each fixture"""
        mdp = load_fixture(name)
        policy = TabularSoftmaxPolicy.random(mdp.n_states, mdp.n_actions, rng)
        results = check_distributional_contraction(mdp, policy, 50, rng)
        assert all(r.passed for r in results)

    def test_fixed_point_mean_is_q(self, chain3, chain3_policy):
        """Test that iterating the backup converges to Q with vanishing variance"""
        means, variances, sweeps = distributional_fixed_point(chain3, chain3_policy)
        np.testing.assert_allclose(means, solve_q(chain3, chain3_policy).q, atol=1e-9)
        assert np.max(variances) < 1e-6
        assert sweeps > 1


class TestDiagnostics:
    """Test cases for the variance split and stability metrics"""

    def test_decomposition_needs_suffix_sampling(self, chain3, chain3_policy):
        """Test that a source that cannot continue from (s, a) is rejected"""
        estimator = TabularEstimator(solve_q(chain3, chain3_policy), "gae")
        with pytest.raises(UnsupportedCapabilityError):
            variance_decomposition(object(), chain3_policy, estimator, 10, np.random.default_rng(0))

    def test_decomposition_runs(self, chain3, chain3_policy, rng):
        """Test that the split returns finite parts with a positive standard error"""
        estimator = TabularEstimator(solve_q(chain3, chain3_policy), "uae", lam=0.5)
        parts = variance_decomposition(chain3, chain3_policy, estimator, 500, rng)
        assert np.isfinite(parts.trajectory) and np.isfinite(parts.state_action)
        assert parts.trajectory_se > 0.0

    def test_decomposition_needs_two_pairs(self, chain3, chain3_policy, rng):
        """Test that a single pair is rejected"""
        estimator = TabularEstimator(solve_q(chain3, chain3_policy))
        with pytest.raises(ValueError, match="at least 2"):
            variance_decomposition(chain3, chain3_policy, estimator, 1, rng)

    def test_variance_of_policy_updates(self):
        """Test VPU on hand-picked snapshots"""
        assert variance_of_policy_updates([[0.0], [1.0], [2.0]]) == 0.0
        assert variance_of_policy_updates([[0.0], [1.0], [3.0]]) == pytest.approx(0.25)

    def test_total_variation(self):
        """Test TV on normalized loss series"""
        assert total_variation([0.0, 1.0, 0.0]) == pytest.approx(1.0)
        assert total_variation([5.0, 5.0, 5.0]) == 0.0
        assert stability_metrics([[0.0], [1.0]], [2.0, 4.0]) == (0.0, 1.0)

    def test_metrics_need_two_points(self):
        """Test that one snapshot or one loss is rejected"""
        with pytest.raises(ValueError):
            variance_of_policy_updates([[1.0, 2.0]])
        with pytest.raises(ValueError):
            total_variation([1.0])

    def test_check_result_line(self):
        """Test the one-line report format"""
        assert CheckResult("gae", 1e-13, 1e-12, True).to_line() == "gae 1e-13 1e-12 PASS"
        assert CheckResult("gae", 2.0, 1.0, False).to_dict()["passed"] is False
