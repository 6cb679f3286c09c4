import pytest
import numpy as np

from dpo_lab.environments import (
    ENVIRONMENTS,
    Lqr1D,
    TabularMDP,
    categorical,
    fixture_names,
    load_fixture,
    load_mdp,
    lqr_riccati,
    make_env,
    mdp_sample_episode,
    random_mdp,
    save_mdp,
)


class TestContinuousEnvironments:
    """Test cases for the continuous-control tasks"""

    @pytest.mark.parametrize("name", sorted(ENVIRONMENTS))
    def test_reset_and_step_shapes(self, name, rng):
        """Test that observations have the declared width and rewards are bounded"""
        env = make_env(name, horizon=5)
        obs = env.reset(rng)
        assert obs.shape == (env.state_dim,)
        result = env.step(env.bounds.upper, rng)
        assert result.next_state.shape == (env.state_dim,)
        assert abs(result.reward) <= env.reward_bound
        assert not result.terminal

    @pytest.mark.parametrize("name", sorted(ENVIRONMENTS))
    def test_same_generator_state_reproduces_step(self, name):
        """Test that identical state, action and generator state give identical steps"""
        env_a, env_b = make_env(name), make_env(name)
        obs_a = env_a.reset(np.random.default_rng(7))
        obs_b = env_b.reset(np.random.default_rng(7))
        np.testing.assert_array_equal(obs_a, obs_b)
        action = 0.5 * env_a.bounds.upper
        step_a = env_a.step(action, np.random.default_rng(8))
        step_b = env_b.step(action, np.random.default_rng(8))
        np.testing.assert_array_equal(step_a.next_state, step_b.next_state)
        assert step_a.reward == step_b.reward

    def test_truncation_at_horizon(self, rng):
        """Test that the episode is truncated, not terminated, after the horizon"""
        env = make_env("lqr1d", horizon=3)
        env.reset(rng)
        flags = [env.step(np.zeros(1), rng).truncated for _ in range(3)]
        assert flags == [False, False, True]

    def test_action_outside_bounds_rejected(self, rng):
        """Test that an out-of-range action raises"""
        env = make_env("pendulum")
        env.reset(rng)
        with pytest.raises(ValueError, match="outside bounds"):
            env.step(np.array([2.5]), rng)

    def test_action_of_wrong_width_rejected(self, rng):
        """Test that an action with the wrong dimension raises"""
        env = make_env("pointmass")
        env.reset(rng)
        with pytest.raises(ValueError, match="expects a finite action"):
            env.step(np.zeros(3), rng)

    def test_step_before_reset(self, rng):
        """Test that stepping a fresh environment raises"""
        with pytest.raises(RuntimeError, match="has not been reset"):
            make_env("lqr1d").step(np.zeros(1), rng)

    def test_snapshot_and_restore(self, rng):
        """Test that restoring a snapshot replays the same transition"""
        env = make_env("pointmass")
        env.reset(rng)
        env.step(np.array([0.3, -0.2]), rng)
        state, elapsed = env.snapshot()
        first = env.step(np.array([1.0, 1.0]), np.random.default_rng(1))
        env.restore(state, elapsed)
        second = env.step(np.array([1.0, 1.0]), np.random.default_rng(1))
        np.testing.assert_array_equal(first.next_state, second.next_state)

    def test_pendulum_observation(self, rng):
        """Test that the pendulum observes (cos, sin, angular velocity)"""
        env = make_env("pendulum")
        obs = env.restore(np.array([0.0, 1.5]))
        np.testing.assert_allclose(obs, [1.0, 0.0, 1.5])

    def test_unknown_environment(self):
        """Test that an unknown name lists the available environments"""
        with pytest.raises(ValueError, match="Unknown environment"):
            make_env("cartpole")

    def test_invalid_horizon(self):
        """Test that a zero horizon is rejected"""
        with pytest.raises(ValueError, match="Horizon"):
            make_env("lqr1d", horizon=0)


class TestLqr:
    """Test cases for the LQR closed-form solution"""

    def test_riccati_gain_converges(self):
        """Test that the long-horizon gain solves the stationary Riccati equation"""
        env = Lqr1D(horizon=400)
        P, _, K = lqr_riccati(env)
        p = P[-1]
        stationary = env.state_cost + env.a ** 2 * p - (env.a * env.b * p) ** 2 / (env.action_cost + env.b ** 2 * p)
        assert stationary == pytest.approx(p, rel=1e-10)
        assert 0.0 < K[-1] < env.a / env.b

    def test_cost_to_go_zero_with_no_steps(self):
        """Test the recursion's starting point"""
        P, c, K = lqr_riccati(Lqr1D(horizon=10))
        assert P[0] == 0.0 and c[0] == 0.0 and K[0] == 0.0
        assert P[1] == pytest.approx(Lqr1D.state_cost)


class TestTabularMdp:
    """Test cases for finite MDPs"""

    def test_fixtures_load(self):
        """Test that every shipped fixture parses and validates"""
        assert fixture_names() == ["chain3", "grid4", "mixed3x3"]
        for name in fixture_names():
            mdp = load_fixture(name)
            assert 0.0 <= mdp.gamma < 1.0

    def test_chain3_contents(self, chain3):
        """Test the chain fixture's shape and a known entry"""
        assert (chain3.n_states, chain3.n_actions, chain3.gamma) == (3, 2, 0.9)
        np.testing.assert_allclose(chain3.transitions[0, 1], [0.25, 0.5, 0.25])
        assert chain3.rewards[1, 0] == -0.5

    def test_save_load(self, tmp_path, rng):
        """Test that a saved MDP is read back exactly"""
        mdp = random_mdp(4, 3, 0.8, rng)
        loaded = load_mdp(save_mdp(mdp, tmp_path / "m.mdp"))
        np.testing.assert_array_equal(loaded.transitions, mdp.transitions)
        np.testing.assert_array_equal(loaded.rewards, mdp.rewards)
        assert loaded.gamma == mdp.gamma

    def test_missing_file(self, tmp_path):
        """Test that a missing file raises FileNotFoundError"""
        with pytest.raises(FileNotFoundError):
            load_mdp(tmp_path / "absent.mdp")

    def test_malformed_header(self, tmp_path):
        """Test that a wrong header is reported with the file name"""
        path = tmp_path / "bad.mdp"
        path.write_text("mdp 2 2 0.9\n")
        with pytest.raises(ValueError, match="expected header"):
            load_mdp(path)

    def test_wrong_row_count(self, tmp_path):
        """Test that a truncated table is rejected"""
        path = tmp_path / "short.mdp"
        path.write_text("tabular 1 1 0.5\n1.0\n")
        with pytest.raises(ValueError, match="data rows"):
            load_mdp(path)

    def test_rows_must_be_probabilities(self):
        """Test that transition rows must sum to one"""
        with pytest.raises(ValueError, match="probability vector"):
            TabularMDP(np.full((2, 1, 2), 0.4), np.zeros((2, 1)), 0.9, np.array([0.5, 0.5]))

    def test_gamma_range(self):
        """Test that a discount of one is rejected"""
        with pytest.raises(ValueError, match="Discount"):
            TabularMDP(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0, np.ones(1))

    def test_unknown_fixture(self):
        """Test that an unknown fixture name lists what is available"""
        with pytest.raises(ValueError, match="chain3"):
            load_fixture("nope")

    def test_policy_transitions_are_stochastic(self, chain3, chain3_policy):
        """Test that the policy-induced chain has probability rows"""
        P = chain3.policy_transitions(chain3_policy.probs)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)

    def test_policy_shape_checked(self, chain3):
        """Test that a policy table of the wrong shape is rejected"""
        with pytest.raises(ValueError, match="Policy table"):
            chain3.policy_transitions(np.full((2, 2), 0.5))

    def test_sample_suffixes_shapes(self, chain3, chain3_policy, rng):
        """Test that suffixes start at the requested pairs and have the requested length"""
        suffixes = chain3.sample_suffixes(chain3_policy.probs, [0, 2], [1, 0], 4, rng)
        assert suffixes.states.shape == (2, 5)
        assert suffixes.rewards.shape == (2, 4)
        np.testing.assert_array_equal(suffixes.states[:, 0], [0, 2])
        assert suffixes.rewards[0, 0] == chain3.rewards[0, 1]

    def test_episode_rewards_match_table(self, chain3, chain3_policy, rng):
        """Test that sampled rewards are read from the reward table"""
        episode = mdp_sample_episode(chain3, chain3_policy.probs, 20, rng)
        np.testing.assert_array_equal(episode.rewards, chain3.rewards[episode.states, episode.actions])

    def test_categorical_frequencies(self, rng):
        """Test that categorical draws follow the row probabilities"""
        probs = np.tile([0.2, 0.5, 0.3], (100_000, 1))
        counts = np.bincount(categorical(probs, rng), minlength=3) / 100_000
        np.testing.assert_allclose(counts, [0.2, 0.5, 0.3], atol=0.01)
