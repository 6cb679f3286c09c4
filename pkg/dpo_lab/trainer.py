"""
Training loop, evaluation and run diagnostics

Every environment step goes to both the replay buffer D and the on-policy
batch B. D feeds the interaction-level critic update, the baseline and the
off-policy term; B is consumed once per cycle by the policy and the batch-level
critic update and then cleared.
"""
import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from .baseline import ResidualBaseline
from .buffers import OnPolicyBatch, ReplayBuffer, TransitionBatch
from .config import RunConfig
from .critic import DistributionalCritic
from .distributions import transform_action
from .environments import ContinuousEnv, make_env
from .errors import NonFiniteError
from .estimators import RolloutArrays, interpolate_advantage, monte_carlo_advantage, uae
from .funcapprox import load_checkpoint, save_checkpoint
from .oracle import total_variation, variance_of_policy_updates
from .policy import (
    BetaPolicy,
    PolicyBatch,
    RewardScaler,
    RunningNormalizer,
    combined_update,
    normalize_advantages,
    positive_advantage,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "eval_return_mean",
    "eval_return_std",
    "critic_kl",
    "critic_ce",
    "baseline_loss",
    "policy_loss_on",
    "policy_loss_off",
    "entropy",
    "mean_abs_residual",
    "mean_pos_adv",
)
DIAGNOSTIC_COLUMNS = (
    "vpu",
    "tv",
    "onpolicy_grad_var",
    "offpolicy_grad_var",
    "mean_abs_residual",
    "mean_pos_adv",
)
REPLAY_SAMPLE_SIZE = 10_000
NETWORK_FILES = ("policy", "critic", "critic_target", "baseline")


class EvalResult(NamedTuple):
    mean: float
    std: float
    returns: np.ndarray


@dataclass
class UpdateCounts:
    critic_kl: int = 0
    baseline: int = 0
    policy: int = 0
    critic_ce: int = 0
    cycles: int = 0


class CycleTargets(NamedTuple):
    """Per-step quantities computed for B at the end of a cycle"""

    advantages: np.ndarray
    critic_targets: np.ndarray
    baselines: np.ndarray
    critic_means: np.ndarray


@dataclass
class TrainSummary:
    steps: int
    out_dir: Path
    counts: UpdateCounts
    final_return: float = float("nan")
    evaluations: List[Tuple[int, float]] = field(default_factory=list)


def evaluate(
    policy: BetaPolicy,
    env: ContinuousEnv,
    episodes: int,
    rng: np.random.Generator,
    normalizer: Optional[RunningNormalizer] = None,
) -> EvalResult:
    """
    Run full episodes with the Beta mean action and no exploration noise

    Args:
        policy: Policy to evaluate
        env: Environment instance used only for evaluation
        episodes: Number of episodes
        rng: Generator for resets and dynamics noise
        normalizer: Observation normalizer the policy was trained with

    Returns:
        EvalResult: Mean and standard deviation of the episodic returns, and the returns themselves
    """
    if episodes < 1:
        raise ValueError(f"episodes must be positive, got {episodes}")
    returns = np.zeros(episodes)
    for episode in range(episodes):
        obs = env.reset(rng)
        done = False
        while not done:
            state = obs if normalizer is None else normalizer.normalize(obs)
            x = policy.mean_action(state[None])[0]
            action, _ = transform_action(x, env.bounds)
            result = env.step(action, rng)
            returns[episode] += result.reward
            obs = result.next_state
            done = result.terminal or result.truncated
    return EvalResult(float(returns.mean()), float(returns.std()), returns)


def _finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise NonFiniteError(f"Non-finite {name}: {value}")
    return float(value)


class Trainer:
    """Runs the distillation training loop for one configuration"""

    def __init__(self, config: RunConfig):
        """
        Build environments, networks and buffers from the configuration

        The master seed fans out to five independent streams: parameter
        initialization, environment dynamics, policy sampling, critic sampling
        and replay sampling.
        """
        self.config = config
        init_seq, env_seq, policy_seq, critic_seq, replay_seq = np.random.SeedSequence(config.seed).spawn(5)
        init_rng = np.random.default_rng(init_seq)
        self.env_rng = np.random.default_rng(env_seq)
        self.policy_rng = np.random.default_rng(policy_seq)
        self.critic_rng = np.random.default_rng(critic_seq)
        self.replay_rng = np.random.default_rng(replay_seq)

        self.env = make_env(config.env, config.horizon)
        self.eval_env = make_env(config.env, config.horizon)
        obs_dim, action_dim = self.env.state_dim, self.env.action_dim
        hidden = config.hidden_sizes
        lr = config.learning_rate

        self.policy = BetaPolicy(obs_dim, action_dim, init_rng, hidden, lr)
        self.critic = DistributionalCritic(
            obs_dim, action_dim, init_rng, hidden, lr, tau=config.tau, sigma_floor=config.sigma_floor
        )
        self.baseline = ResidualBaseline(
            obs_dim, action_dim, init_rng, hidden, lr, m_actions=config.m_actions, enabled=config.residual_baseline
        )
        self.policy_config = config.policy_config()

        self.replay = ReplayBuffer(obs_dim, self.env.bounds, config.replay_capacity)
        self.batch = OnPolicyBatch()
        self.normalizer = RunningNormalizer(obs_dim)
        self.reward_scaler = RewardScaler(config.gamma)

        self.out_dir = Path(config.out_dir)
        self.metrics_path = self.out_dir / "metrics.csv"
        self.step = 0
        self.counts = UpdateCounts()
        self._pending: Dict[str, List[float]] = {}
        self._last: Dict[str, float] = {}
        self._warned_warmup = False

    @property
    def warm(self) -> bool:
        return len(self.replay) >= max(self.config.warmup, 1)

    def _record(self, name: str, value: float) -> None:
        value = _finite(name, value)
        self._pending.setdefault(name, []).append(value)
        self._last[name] = value

    def _replay_minibatch(self) -> TransitionBatch:
        """Uniform minibatch from D, normalized with the current statistics"""
        raw = self.replay.sample(self.config.minibatch_size, self.replay_rng)
        return TransitionBatch(
            self.normalizer.normalize(raw.states),
            raw.xs,
            self.reward_scaler.scale(raw.rewards),
            self.normalizer.normalize(raw.next_states),
            raw.terminals,
        )

    def _skip_warmup(self, what: str) -> None:
        if not self._warned_warmup:
            logger.warning(
                "Replay buffer holds %d of %d warmup transitions; skipping %s",
                len(self.replay), self.config.warmup, what,
            )
            self._warned_warmup = True

    # -- interaction -------------------------------------------------------

    def _interaction_update(self) -> None:
        if not self.config.interaction_critic:
            return
        if not self.warm:
            self._skip_warmup("critic updates")
            return
        loss = self.critic.kl_td_update(self._replay_minibatch(), self.policy, self.config.gamma, self.critic_rng)
        self.critic.polyak_update()
        self.counts.critic_kl += 1
        self._record("critic_kl", loss)

    def _act(self, obs: np.ndarray) -> Tuple[np.ndarray, bool]:
        """One environment step with storage and the interaction-level update; returns (obs, episode ended)"""
        state = self.normalizer.normalize(obs)
        x, log_prob = self.policy.sample(state[None], self.policy_rng)
        action, _ = transform_action(x[0], self.env.bounds)
        result = self.env.step(action, self.env_rng)
        episode_end = result.terminal or result.truncated

        self.reward_scaler.update(result.reward, episode_end)
        self.replay.add(obs, action, result.reward, result.next_state, result.terminal)
        self.normalizer.update(result.next_state)
        self.batch.add(
            state, x[0], log_prob[0], result.reward,
            self.normalizer.normalize(result.next_state), result.terminal, result.truncated,
        )
        self.step += 1
        self._interaction_update()
        return result.next_state, episode_end

    # -- cycle ---------------------------------------------------------------

    def _update_baseline(self) -> None:
        if not self.config.residual_baseline:
            return
        if not self.warm:
            self._skip_warmup("baseline updates")
            return
        for _ in range(self.config.baseline_updates):
            minibatch = self._replay_minibatch()
            loss = self.baseline.update(minibatch.states, minibatch.xs, self.critic, self.policy, self.critic_rng)
            self.counts.baseline += 1
            self._record("baseline_loss", loss)
            self._record("mean_abs_residual", float(np.mean(np.abs(self.baseline.residual(minibatch.states, minibatch.xs)))))

    def compute_targets(self, data: Dict[str, np.ndarray], segments: List[Tuple[int, int]]) -> CycleTargets:
        """
        Policy advantages and critic target vectors for every step of B

        Each segment ends at a terminal, a time limit or the end of the batch;
        only a terminal stops the bootstrap. The policy advantage runs the
        estimator on the critic mean and interpolates with Q - b; the critic
        targets run it once per critic sample and add the baseline back.
        """
        config = self.config
        estimator = uae if config.estimator == "uae" else monte_carlo_advantage
        n = data["rewards"].shape[0]
        l = config.critic_samples
        baselines = self.baseline.baseline_value(data["states"], self.critic, self.policy, self.critic_rng)
        advantages = np.zeros(n)
        critic_targets = np.zeros((n, l))
        critic_means = np.zeros(n)

        for start, end in segments:
            T = end - start
            states = data["states"][start:end]
            last = data["next_states"][end - 1][None]
            next_x, _ = self.policy.sample(last, self.policy_rng)
            all_states = np.vstack([states, last])
            all_xs = np.vstack([data["xs"][start:end], next_x])
            rewards = self.reward_scaler.scale(data["rewards"][start:end])
            b = baselines[start:end]
            dones = np.zeros(T + 1)
            dones[T] = data["terminals"][end - 1]

            q_mean = self.critic.mean_value(all_states, all_xs)
            q_samples = self.critic.sample_value_vector(all_states, all_xs, l, self.critic_rng)
            a_mean = estimator(RolloutArrays(rewards, q_mean, b, dones, config.gamma, config.lam))
            a_samples = estimator(RolloutArrays(rewards, q_samples, b[:, None], dones, config.gamma, config.lam))

            advantages[start:end] = interpolate_advantage(a_mean, q_mean[:T] - b, config.nu)
            critic_targets[start:end] = a_samples + b[:, None]
            critic_means[start:end] = q_mean[:T]

        return CycleTargets(normalize_advantages(advantages), critic_targets, baselines, critic_means)

    def _train_cycle(self) -> None:
        config = self.config
        self._update_baseline()
        data = self.batch.arrays()
        targets = self.compute_targets(data, self.batch.segments())
        self.batch.save(
            self.out_dir / "batch.npz",
            advantages=targets.advantages,
            baselines=targets.baselines,
            critic_means=targets.critic_means,
            critic_targets=targets.critic_targets,
        )

        policy_config = self.policy_config
        if not self.warm and policy_config.omega < 1.0:
            self._skip_warmup("the off-policy term")
            policy_config = dataclasses.replace(policy_config, omega=1.0)
        full = PolicyBatch(data["states"], data["xs"], data["log_probs"], targets.advantages)
        n = len(full.advantages)
        # trpo takes one natural-gradient step on the whole batch
        size = n if config.learner == "trpo" else min(config.minibatch_size, n)

        for _ in range(config.epochs):
            order = self.policy_rng.permutation(n)
            for start in range(0, n, size):
                indices = order[start:start + size]
                replay_states = self._replay_minibatch().states if policy_config.omega < 1.0 else None
                stats = combined_update(
                    policy_config, self.policy, full.subset(indices), self.critic, self.baseline,
                    replay_states, self.policy_rng,
                )
                self.policy.params.check_finite("policy parameters")
                self.counts.policy += 1
                self._record("policy_loss_on", stats.loss_on)
                if policy_config.omega < 1.0:
                    self._record("policy_loss_off", stats.loss_off)
                    self._record("mean_pos_adv", stats.mean_pos_adv)
                self._batch_critic_updates(data, targets, indices)

        self._record("entropy", float(np.mean(self.policy.entropy(data["states"]))))
        self.batch.clear()
        self.counts.cycles += 1
        logger.debug("Cycle %d finished at step %d", self.counts.cycles, self.step)

    def _batch_critic_updates(self, data: Dict[str, np.ndarray], targets: CycleTargets, indices: np.ndarray) -> None:
        if not self.config.batch_critic:
            return
        n = data["rewards"].shape[0]
        size = min(self.config.minibatch_size, len(indices))
        for k in range(self.config.critic_updates):
            chosen = indices[:size] if k == 0 else self.policy_rng.choice(n, size=size, replace=False)
            loss = self.critic.cross_entropy_update(
                data["states"][chosen], data["xs"][chosen], targets.critic_targets[chosen]
            )
            self.critic.polyak_update()
            self.counts.critic_ce += 1
            self._record("critic_ce", loss)

    # -- output --------------------------------------------------------------

    def evaluate(self) -> EvalResult:
        """Evaluation on its own generator so that it never perturbs the training streams"""
        rng = np.random.default_rng([self.config.seed, self.step])
        return evaluate(self.policy, self.eval_env, self.config.eval_episodes, rng, self.normalizer)

    def _write_metrics(self, result: EvalResult) -> None:
        row = {"step": self.step, "eval_return_mean": result.mean, "eval_return_std": result.std}
        for name in METRIC_COLUMNS[3:]:
            values = self._pending.get(name)
            row[name] = float(np.mean(values)) if values else float("nan")
        self._pending.clear()
        new_file = not self.metrics_path.exists()
        with self.metrics_path.open("a", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=METRIC_COLUMNS)
            if new_file:
                writer.writeheader()
            writer.writerow(row)

    def save_checkpoint(self) -> Path:
        """Write all four networks and the normalizer statistics to checkpoints/step_<n>/"""
        directory = self.out_dir / "checkpoints" / f"step_{self.step}"
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(directory / "policy.mlp", self.policy.spec, self.policy.params)
        save_checkpoint(directory / "critic.mlp", self.critic.spec, self.critic.params)
        save_checkpoint(directory / "critic_target.mlp", self.critic.spec, self.critic.target)
        save_checkpoint(directory / "baseline.mlp", self.baseline.spec, self.baseline.params)
        state = {
            "step": self.step,
            "observations": self.normalizer.state_dict(),
            "rewards": self.reward_scaler.state_dict(),
        }
        (directory / "normalizer.json").write_text(json.dumps(state, indent=2))
        return directory

    def _evaluate_and_log(self, summary: TrainSummary) -> None:
        result = self.evaluate()
        self._write_metrics(result)
        self.save_checkpoint()
        summary.evaluations.append((self.step, result.mean))
        summary.final_return = result.mean
        logger.info("Step %d: eval return %.3f +/- %.3f", self.step, result.mean, result.std)

    def _dump_diagnostics(self, error: Exception) -> Path:
        norms = {
            "policy": float(np.linalg.norm(self.policy.params.values)),
            "critic": float(np.linalg.norm(self.critic.params.values)),
            "critic_target": float(np.linalg.norm(self.critic.target.values)),
            "baseline": float(np.linalg.norm(self.baseline.params.values)),
        }
        dump = {
            "step": self.step,
            "error": str(error),
            "last_losses": self._last,
            "parameter_norms": norms,
            "counts": dataclasses.asdict(self.counts),
        }
        path = self.out_dir / "diagnostic_dump.json"
        path.write_text(json.dumps(dump, indent=2))
        return path

    def run(self) -> TrainSummary:
        """
        Train for ``total_steps`` environment steps

        Returns:
            TrainSummary: Update counts and the evaluation history

        Raises:
            NonFiniteError: If a loss or a parameter vector becomes non-finite; a
                diagnostic dump is written to the output directory first
        """
        config = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        config.to_file(self.out_dir / "config.cfg")
        if self.metrics_path.exists():
            self.metrics_path.unlink()
        summary = TrainSummary(steps=0, out_dir=self.out_dir, counts=self.counts)

        try:
            self._evaluate_and_log(summary)
            obs = self.env.reset(self.env_rng)
            self.normalizer.update(obs)
            while self.step < config.total_steps:
                obs, episode_end = self._act(obs)
                if episode_end:
                    obs = self.env.reset(self.env_rng)
                    self.normalizer.update(obs)
                if len(self.batch) >= config.batch_size:
                    self._train_cycle()
                if self.step % config.eval_interval == 0:
                    self._evaluate_and_log(summary)
            if self.step % config.eval_interval != 0:
                self._evaluate_and_log(summary)
        except NonFiniteError as e:
            path = self._dump_diagnostics(e)
            logger.error("Training aborted at step %d: %s (dump written to %s)", self.step, e, path)
            raise

        self.replay.save(self.out_dir / "replay.npz", limit=REPLAY_SAMPLE_SIZE)
        summary.steps = self.step
        return summary


def train(config: RunConfig) -> TrainSummary:
    """Convenience wrapper: build a ``Trainer`` and run it"""
    return Trainer(config).run()


# -- diagnostics -------------------------------------------------------------


def checkpoint_dirs(run_dir: Union[str, Path]) -> List[Tuple[int, Path]]:
    """(step, directory) pairs under checkpoints/, ordered by step"""
    root = Path(run_dir) / "checkpoints"
    if not root.is_dir():
        raise FileNotFoundError(f"No checkpoints directory in {run_dir}")
    found = []
    for path in root.iterdir():
        prefix, _, step = path.name.partition("_")
        if path.is_dir() and prefix == "step" and step.isdigit():
            found.append((int(step), path))
    if not found:
        raise FileNotFoundError(f"No checkpoints found in {root}")
    return sorted(found)


class Agent(NamedTuple):
    policy: BetaPolicy
    critic: DistributionalCritic
    baseline: ResidualBaseline
    normalizer: RunningNormalizer


def load_agent(directory: Union[str, Path], config: RunConfig) -> Agent:
    """Rebuild the networks and the observation normalizer saved by ``Trainer.save_checkpoint``"""
    directory = Path(directory)
    policy_spec, policy_params = load_checkpoint(directory / "policy.mlp")
    critic_spec, critic_params = load_checkpoint(directory / "critic.mlp")
    _, target_params = load_checkpoint(directory / "critic_target.mlp")
    baseline_spec, baseline_params = load_checkpoint(directory / "baseline.mlp")
    obs_dim = policy_spec.input_dim
    action_dim = policy_spec.output_dim // 2

    policy = BetaPolicy(obs_dim, action_dim, hidden_dims=policy_spec.hidden_dims, params=policy_params)
    critic = DistributionalCritic(
        obs_dim, action_dim, hidden_dims=critic_spec.hidden_dims, tau=config.tau,
        sigma_floor=config.sigma_floor, params=critic_params,
    )
    critic.target = target_params
    baseline = ResidualBaseline(
        obs_dim, action_dim, hidden_dims=baseline_spec.hidden_dims, m_actions=config.m_actions,
        enabled=config.residual_baseline, params=baseline_params,
    )
    state = json.loads((directory / "normalizer.json").read_text())
    return Agent(policy, critic, baseline, RunningNormalizer.from_dict(state["observations"]))


def read_metrics(run_dir: Union[str, Path]) -> List[Dict[str, float]]:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"Metrics file not found: {path}")
    with path.open(newline="") as handle:
        return [{key: float(value) for key, value in row.items()} for row in csv.DictReader(handle)]


def onpolicy_gradient_variance(agent: Agent, states, xs, rng: np.random.Generator) -> float:
    """Batch estimate of E[||u||^2 (Q - b)^2] over on-policy data"""
    q = agent.critic.mean_value(states, xs)
    b = agent.baseline.baseline_value(states, agent.critic, agent.policy, rng)
    return float(np.mean(agent.policy.score_sq_norms(states, xs) * (q - b) ** 2))


def diagnose(run_dir: Union[str, Path], samples: int = REPLAY_SAMPLE_SIZE, seed: int = 0) -> Dict[str, float]:
    """
    Stability and variance diagnostics of a finished run, written to diagnostics.csv

    Args:
        run_dir: Output directory of ``train``
        samples: Maximum number of replay states for the off-policy estimates
        seed: Seed of the generator drawing fresh actions and baseline samples

    Returns:
        Dict: One value per ``DIAGNOSTIC_COLUMNS`` entry; NaN where the artifact is absent

    Raises:
        FileNotFoundError: If the configuration, metrics or checkpoints are missing
    """
    run_dir = Path(run_dir)
    config_path = run_dir / "config.cfg"
    if not config_path.exists():
        raise FileNotFoundError(f"Run configuration not found: {config_path}")
    config = RunConfig.from_file(config_path)
    checkpoints = checkpoint_dirs(run_dir)
    metrics = read_metrics(run_dir)
    rng = np.random.default_rng(seed)

    snapshots = [load_checkpoint(path / "policy.mlp")[1].values for _, path in checkpoints]
    losses = [row["policy_loss_on"] for row in metrics if np.isfinite(row["policy_loss_on"])]
    results = {name: float("nan") for name in DIAGNOSTIC_COLUMNS}
    results["vpu"] = variance_of_policy_updates(snapshots) if len(snapshots) > 1 else 0.0
    results["tv"] = total_variation(losses) if len(losses) > 1 else 0.0

    agent = load_agent(checkpoints[-1][1], config)
    batch_path = run_dir / "batch.npz"
    if batch_path.exists():
        with np.load(batch_path) as batch:
            results["onpolicy_grad_var"] = onpolicy_gradient_variance(agent, batch["states"], batch["xs"], rng)

    replay_path = run_dir / "replay.npz"
    if replay_path.exists():
        with np.load(replay_path) as replay:
            raw_states = replay["states"][:samples]
        if raw_states.shape[0]:
            states = agent.normalizer.normalize(raw_states)
            xs, log_probs = agent.policy.sample(states, rng)
            q = agent.critic.mean_value(states, xs)
            b = agent.baseline.baseline_value(states, agent.critic, agent.policy, rng)
            advantage = positive_advantage(q, b)
            weights = advantage - config.alpha * log_probs
            results["offpolicy_grad_var"] = float(np.mean(agent.policy.score_sq_norms(states, xs) * weights ** 2))
            results["mean_abs_residual"] = float(np.mean(np.abs(agent.baseline.residual(states, xs))))
            results["mean_pos_adv"] = float(np.mean(advantage))

    with (run_dir / "diagnostics.csv").open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=DIAGNOSTIC_COLUMNS)
        writer.writeheader()
        writer.writerow(results)
    return results
