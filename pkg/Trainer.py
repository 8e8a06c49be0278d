import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import TrepPlatform
from TrepPlatform import ConfigError, ContractError, DataError, DivergenceError
from GridNetwork import Action, Cell, RoadNetwork, Trajectory, random_start, random_walk
import Actor
import Critic
import TensorCore as tc


@dataclass(frozen=True)
class TrainConfig:
    delta: int = 3
    epsilon: float = 0.1
    epsilon_final: Optional[float] = None
    omega: int = 16
    gamma_phi: float = 0.001
    gamma_theta: float = 0.001
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    walk_min: int = 10
    walk_max: int = 40
    max_iters: int = 5000
    replay_capacity: int = 10000
    convergence_window: int = 200
    convergence_tolerance: float = 0.01
    convergence_windows: int = 3
    divergence_windows: int = 10
    clip_norm: float = 5.0
    pretrain_epochs: int = 50
    pretrain_critic_iters: int = 200
    mll_mode: str = "teacher_forcing"
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0 or int(self.delta) != self.delta:
            raise ConfigError("delta must be a non-negative integer")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.omega < 1:
            raise ConfigError("omega must be >= 1")
        if not (0 < self.gamma_phi <= 1 and 0 < self.gamma_theta <= 1):
            raise ConfigError("soft-update rates must lie in (0, 1]")
        if not 1 <= self.walk_min <= self.walk_max:
            raise ConfigError("walk lengths must satisfy 1 <= walk_min <= walk_max")
        if self.replay_capacity < self.omega:
            raise ConfigError("replay_capacity must be at least omega")

    @classmethod
    def from_config(cls, config: TrepPlatform.TrepConfig) -> 'TrainConfig':
        values = config.to_dict()
        return cls(**{f: values[f] for f in cls.__dataclass_fields__})

    def epsilon_at(self, iteration: int) -> float:
        """Constant epsilon, or a linear decay to epsilon_final over max_iters."""
        if self.epsilon_final is None or self.max_iters <= 1:
            return self.epsilon
        fraction = min(iteration / (self.max_iters - 1), 1.0)
        return self.epsilon + (self.epsilon_final - self.epsilon) * fraction


@dataclass(frozen=True)
class Experience:
    ground_truth: Trajectory
    actions: Tuple[Action, ...]
    cells: Tuple[Cell, ...]

    def __post_init__(self):
        if len(self.actions) != len(self.ground_truth) - 1 or len(self.cells) != len(self.ground_truth):
            raise ContractError("experience lengths disagree with the ground truth")
        if self.cells[0] != self.ground_truth.cells[0]:
            raise ContractError("a reconstruction starts at the ground-truth start cell")


class ReplayMemory:
    """Bounded FIFO of experiences; only legal reconstructions are admitted."""

    def __init__(self, capacity: int, net: Optional[RoadNetwork] = None):
        if capacity < 1:
            raise ContractError("replay capacity must be positive")
        self.capacity = capacity
        self.net = net
        self._items = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def push(self, experience: Experience):
        if self.net is not None:
            self.net.validate(Trajectory(experience.cells, experience.actions))
        self._items.append(experience)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Experience]:
        if batch_size > len(self._items):
            raise ContractError(f"cannot sample {batch_size} experiences from {len(self._items)}")
        picks = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[int(i)] for i in picks]


class TrainingLog:
    """Training records kept in memory and, when a path is given, appended as JSON lines."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: List[Dict] = []
        if path:
            open(path, "w", encoding="utf-8").close()

    def write(self, **record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


class ConvergenceMonitor:
    """
    Averages batch mean rewards over consecutive blocks of `window` updates.
    Converged once `windows` successive block averages each change by less than
    `tolerance` (relative); diverging once block averages fall for
    `divergence_windows` blocks in a row.
    """

    def __init__(self, window: int, tolerance: float, windows: int, divergence_windows: int):
        self.window = window
        self.tolerance = tolerance
        self.windows = windows
        self.divergence_windows = divergence_windows
        self._pending: List[float] = []
        self.averages: List[float] = []

    def add(self, value: float) -> bool:
        self._pending.append(value)
        if len(self._pending) < self.window:
            return False
        self.averages.append(float(np.mean(self._pending)))
        self._pending = []
        self._check_divergence()
        return self.converged

    @staticmethod
    def _relative_change(previous: float, current: float) -> float:
        if previous == current:
            return 0.0
        return abs(current - previous) / max(abs(previous), 1e-12)

    @property
    def converged(self) -> bool:
        if len(self.averages) < self.windows + 1:
            return False
        recent = self.averages[-(self.windows + 1):]
        return all(self._relative_change(a, b) < self.tolerance for a, b in zip(recent, recent[1:]))

    def _check_divergence(self):
        n = self.divergence_windows
        if len(self.averages) < n + 1:
            return
        recent = self.averages[-(n + 1):]
        if all(b < a for a, b in zip(recent, recent[1:])):
            raise DivergenceError(f"mean batch reward fell for {n} consecutive windows: "
                                  + ", ".join(f"{v:.4f}" for v in recent))


@dataclass
class TrainingResult:
    actor_params: tc.ParameterStore
    critic_params: tc.ParameterStore
    delayed_actor: tc.ParameterStore
    delayed_critic: tc.ParameterStore
    log: TrainingLog
    iterations: int
    converged: bool


def spatial_objective(ground_truth, reconstruction, net: RoadNetwork):
    """sum_{t=2..T} d(x_t, x̂_t); UNREACHABLE when any step has no path."""
    X, Y = Critic.cells_of(ground_truth), Critic.cells_of(reconstruction)
    if len(X) != len(Y):
        raise ContractError(f"lengths differ: {len(X)} vs {len(Y)}")
    total = sum(net.distances[net.vertex(x), net.vertex(y)] for x, y in zip(X[1:], Y[1:]))
    return total if math.isinf(total) else int(total)


def mean_total_reward(actor: Actor.TrajectoryAutoencoder, corpus: Sequence[Trajectory], delta: int,
                      params: Optional[tc.ParameterStore] = None) -> float:
    """Mean total reward of greedy reconstructions over a corpus."""
    if not corpus:
        raise DataError("cannot score an empty corpus")
    rewards = []
    for traj in corpus:
        c = actor.encode_tensor(traj, params)
        recon = actor.reconstruct(c, traj.cells[0], len(traj), Actor.GREEDY, params=params)
        rewards.append(Critic.total_reward(traj.cells, recon.cells, delta, actor.net))
    return float(np.mean(rewards))


def _validate_corpus(corpus: Sequence[Trajectory], net: RoadNetwork) -> List[Trajectory]:
    if not corpus:
        raise DataError("the training corpus is empty")
    checked = []
    for i, traj in enumerate(corpus):
        try:
            net.validate(traj)
        except DataError as e:
            name = traj.label if traj.label is not None else f"#{i + 1}"
            raise DataError(f"trajectory {name}: {e}")
        checked.append(traj.with_actions())
    return checked


def pretrain_actor(actor: Actor.TrajectoryAutoencoder, corpus: Sequence[Trajectory], config: TrainConfig,
                   epochs: Optional[int] = None, seed=None, log: Optional[TrainingLog] = None,
                   quiet: bool = True) -> Tuple[tc.ParameterStore, List[float]]:
    """
    Maximum log-likelihood pretraining: one Adam step per trajectory, corpus
    shuffled every epoch. Returns the trained store and the mean loss per epoch.
    """
    corpus = _validate_corpus(corpus, actor.net)
    epochs = config.pretrain_epochs if epochs is None else epochs
    rng = TrepPlatform.as_rng(TrepPlatform.component_seed(config.seed, "pretrain_actor") if seed is None else seed)
    store = actor.params
    log = log or TrainingLog()
    losses = []
    for epoch in tqdm(range(epochs), desc="pretrain actor", disable=quiet):
        epoch_losses = []
        for i in rng.permutation(len(corpus)):
            with tc.Tape() as tape:
                loss = actor.mll_loss(corpus[int(i)], store, config.mll_mode)
            if len(tape):
                tc.backward(tape, loss, store)
                tc.optimizer_step(store, config.lr_actor, config.clip_norm)
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))
        log.write(phase="pretrain_actor", epoch=epoch, mll_loss=losses[-1])
    if losses:
        TrepPlatform.log(f"Actor pretraining: mll loss {losses[0]:.4f} -> {losses[-1]:.4f} over {epochs} epochs.")
    return store, losses


def _sample_walk(net: RoadNetwork, config: TrainConfig, rng: np.random.Generator) -> Trajectory:
    length = int(rng.integers(config.walk_min, config.walk_max + 1))
    return random_walk(net, random_start(net, rng), length, rng)


def pretrain_critic(actor: Actor.TrajectoryAutoencoder, critic: Critic.QValueEstimator, config: TrainConfig,
                    iterations: Optional[int] = None, corpus: Optional[Sequence[Trajectory]] = None,
                    mode: str = Actor.SAMPLE, seed=None, log: Optional[TrainingLog] = None,
                    quiet: bool = True) -> Tuple[tc.ParameterStore, List[float]]:
    """
    Regress the critic onto Monte-Carlo reward-to-go targets of rollouts from the
    frozen actor. Ground truths are drawn from corpus when given, random walks otherwise.
    """
    iterations = config.pretrain_critic_iters if iterations is None else iterations
    rng = TrepPlatform.as_rng(TrepPlatform.component_seed(config.seed, "pretrain_critic") if seed is None else seed)
    if corpus is not None:
        corpus = _validate_corpus(corpus, actor.net)
    store = critic.params
    log = log or TrainingLog()
    losses = []
    for iteration in tqdm(range(iterations), desc="pretrain critic", disable=quiet):
        batch = []
        for _ in range(config.omega):
            X = corpus[int(rng.integers(len(corpus)))] if corpus else _sample_walk(actor.net, config, rng)
            c = actor.encode_tensor(X)
            recon = actor.reconstruct(c, X.cells[0], len(X), mode, config.epsilon_at(iteration), seed=rng)
            targets = Critic.reward_to_go(Critic.step_rewards(X.cells, recon.cells, config.delta, actor.net))
            batch.append(Critic.CriticSample(X, recon.cells, recon.actions, tuple(targets)))
        with tc.Tape() as tape:
            loss = critic.critic_loss(batch, store)
        if len(tape):
            tc.backward(tape, loss, store)
            tc.optimizer_step(store, config.lr_critic, config.clip_norm)
        losses.append(loss.item() / len(batch))
        log.write(phase="pretrain_critic", iteration=iteration, critic_loss=losses[-1])
    return store, losses


def critic_targets(actor: Actor.TrajectoryAutoencoder, critic: Critic.QValueEstimator, experience: Experience,
                   delta: int, actor_params: tc.ParameterStore, critic_params: tc.ParameterStore
                   ) -> Tuple[List[float], List[np.ndarray]]:
    """
    Bootstrapped targets q_t = r_t + sum_a p'(a) Q'(a) at the next prefix, r_t at the
    last step, with the delayed networks. Also returns the delayed Q-vectors of every
    prefix X̂_{1..t}, t < T, which the actor update reuses.
    """
    X, cells = experience.ground_truth, experience.cells
    prefixes = cells[:-1]
    if not prefixes or len(cells) < 2:
        return [], []
    c = actor.encode_tensor(X, actor_params)
    policies, _ = actor.decode_along(c, prefixes, actor_params)
    annotations = critic.critic_encode(X, critic_params)
    q_vectors = [step.q.numpy() for step in critic.q_sequence(annotations, prefixes, critic_params)]
    rewards = Critic.step_rewards(X.cells, cells, delta, actor.net)
    targets = []
    for t, r in enumerate(rewards):
        terminal = t + 1 >= len(prefixes)
        if terminal:
            targets.append(Critic.bellman_target(r, None, None, True))
        else:
            targets.append(Critic.bellman_target(r, policies[t + 1].value, q_vectors[t + 1], False))
    return targets, q_vectors


def actor_objective(actor: Actor.TrajectoryAutoencoder, batch: Sequence[Experience],
                    q_vectors: Sequence[Sequence[np.ndarray]], params: Optional[tc.ParameterStore] = None
                    ) -> tc.Tensor:
    """Negated expected value: -sum_k sum_t sum_a p(a | X̂_{1..t}, c(X)) Q'(a); Q' is constant."""
    terms = []
    for experience, qs in zip(batch, q_vectors):
        if not qs:
            continue
        c = actor.encode_tensor(experience.ground_truth, params)
        policies, _ = actor.decode_along(c, experience.cells[:len(qs)], params)
        for policy, q in zip(policies, qs):
            # keep illegal actions' Q out of the sum even when their policy mass underflows
            terms.append(tc.dot(policy, tc.constant(np.where(policy.value > 0, q, 0.0))))
    if not terms:
        return tc.constant(0.0)
    return tc.neg(tc.sum_(tc.stack(terms)))


def _update(store: tc.ParameterStore, loss_fn, learning_rate: float, clip_norm: float) -> float:
    with tc.Tape() as tape:
        loss = loss_fn()
    if len(tape):
        tc.backward(tape, loss, store)
        tc.optimizer_step(store, learning_rate, clip_norm)
    return loss.item()


def train(actor: Actor.TrajectoryAutoencoder, critic: Critic.QValueEstimator, config: TrainConfig,
          delayed_actor: Optional[tc.ParameterStore] = None, delayed_critic: Optional[tc.ParameterStore] = None,
          log: Optional[TrainingLog] = None, seed=None, quiet: bool = True) -> TrainingResult:
    """
    Actor-critic training with delayed networks and replay memory. Each iteration
    samples one random walk, reconstructs it with the delayed actor under
    epsilon-greedy exploration and stores it; once omega experiences are held, a
    batch updates the critic towards bootstrapped targets, the actor towards higher
    expected Q', and both delayed copies by soft mixing.
    """
    net = actor.net
    rng = TrepPlatform.as_rng(TrepPlatform.component_seed(config.seed, "train") if seed is None else seed)
    phi, theta = actor.params, critic.params
    phi_delayed = delayed_actor if delayed_actor is not None else phi.copy()
    theta_delayed = delayed_critic if delayed_critic is not None else theta.copy()
    memory = ReplayMemory(config.replay_capacity, net)
    monitor = ConvergenceMonitor(config.convergence_window, config.convergence_tolerance,
                                 config.convergence_windows, config.divergence_windows)
    log = log or TrainingLog()

    iterations = 0
    converged = False
    for iteration in tqdm(range(config.max_iters), desc="train", disable=quiet):
        iterations = iteration + 1
        epsilon = config.epsilon_at(iteration)
        X = _sample_walk(net, config, rng)
        c_delayed = actor.encode_tensor(X, phi_delayed)
        recon = actor.reconstruct(c_delayed, X.cells[0], len(X), Actor.EPSILON_GREEDY, epsilon,
                                  seed=rng, params=phi_delayed)
        memory.push(Experience(X, recon.actions, recon.cells))

        if len(memory) >= config.omega:
            batch = memory.sample(config.omega, rng)
            samples, q_vectors = [], []
            for experience in batch:
                targets, qs = critic_targets(actor, critic, experience, config.delta, phi_delayed, theta_delayed)
                samples.append(Critic.CriticSample(experience.ground_truth, experience.cells,
                                                   experience.actions, tuple(targets)))
                q_vectors.append(qs)
            critic_loss = _update(theta, lambda: critic.critic_loss(samples, theta),
                                  config.lr_critic, config.clip_norm)
            actor_loss = _update(phi, lambda: actor_objective(actor, batch, q_vectors, phi),
                                 config.lr_actor, config.clip_norm)
            mean_reward = float(np.mean([Critic.total_reward(e.ground_truth, e.cells, config.delta, net)
                                         for e in batch]))
            log.write(phase="train", iteration=iteration, mean_reward=mean_reward, critic_loss=critic_loss,
                      actor_loss=actor_loss, epsilon=epsilon)
            converged = monitor.add(mean_reward)

        tc.soft_update(phi_delayed, phi, config.gamma_phi)
        tc.soft_update(theta_delayed, theta, config.gamma_theta)
        if converged:
            TrepPlatform.log(f"Converged after {iterations} iterations.")
            break

    return TrainingResult(phi, theta, phi_delayed, theta_delayed, log, iterations, converged)
