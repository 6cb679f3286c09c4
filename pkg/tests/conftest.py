import pytest
import numpy as np
from pathlib import Path

from dpo_lab.baseline import ResidualBaseline
from dpo_lab.config import RunConfig
from dpo_lab.critic import DistributionalCritic
from dpo_lab.environments import load_fixture
from dpo_lab.oracle import TabularSoftmaxPolicy
from dpo_lab.policy import BetaPolicy

FIXTURES_DIR = Path(__file__).parent / "fixtures"
SMALL_HIDDEN = (5,)


@pytest.fixture
def rng():
    """Seeded generator shared by a single test"""
    return np.random.default_rng(12345)


@pytest.fixture
def chain3():
    """Three-state, two-action fixture MDP"""
    return load_fixture("chain3")


@pytest.fixture
def chain3_policy(chain3):
    """Fixed non-uniform softmax policy on chain3"""
    return TabularSoftmaxPolicy(np.array([[0.3, -0.2], [-0.5, 0.4], [0.1, 0.0]]))


@pytest.fixture
def small_agent(rng):
    """Policy, critic and baseline with one hidden layer of 5 units over 3-d states and 2-d actions"""
    policy = BetaPolicy(3, 2, rng, SMALL_HIDDEN)
    critic = DistributionalCritic(3, 2, rng, SMALL_HIDDEN)
    baseline = ResidualBaseline(3, 2, rng, SMALL_HIDDEN, m_actions=4)
    return policy, critic, baseline


@pytest.fixture
def clean_environment(monkeypatch, tmp_path):
    """No DPO_LAB_CONFIG, an empty working directory and an empty home"""
    monkeypatch.delenv("DPO_LAB_CONFIG", raising=False)
    home = tmp_path / "home"
    home.mkdir()
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.setattr(Path, "home", classmethod(lambda cls: home))
    monkeypatch.chdir(work)
    return monkeypatch


@pytest.fixture
def tiny_config(tmp_path):
    """A run small enough to train in a few seconds: 96 steps, cycles of 32"""
    return RunConfig(
        env="lqr1d",
        learner="ppo",
        total_steps=96,
        seed=3,
        out_dir=str(tmp_path / "run"),
        batch_size=32,
        minibatch_size=16,
        epochs=2,
        baseline_updates=2,
        critic_updates=1,
        warmup=0,
        eval_interval=48,
        eval_episodes=2,
        horizon=20,
        hidden_sizes=(8,),
        m_actions=4,
        critic_samples=5,
        replay_capacity=500,
    )


@pytest.fixture
def tiny_config_file():
    """Path of the tiny run configuration shipped with the tests"""
    return FIXTURES_DIR / "tiny_run.cfg"
