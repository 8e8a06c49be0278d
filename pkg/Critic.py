from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import TrepPlatform
from TrepPlatform import ContractError
from GridNetwork import Action, Cell, NUM_ACTIONS, RoadNetwork, Trajectory
from GraphEmbed import EmbeddingTable
import Actor
import TensorCore as tc


@dataclass(frozen=True)
class CriticConfig:
    hidden_size: int = 512
    attention_size: int = 64  # LSTM state size of the critic encoder and decoder
    embed_dim: int = 32

    def __post_init__(self):
        if min(self.hidden_size, self.attention_size, self.embed_dim) < 1:
            raise ContractError("critic sizes must be positive")

    @classmethod
    def from_config(cls, config: TrepPlatform.TrepConfig) -> 'CriticConfig':
        return cls(config.critic_hidden, config.critic_rnn, config.embed_dim)


@dataclass(frozen=True)
class QVector:
    values: np.ndarray  # Q(a) for the 9 actions
    state_value: float
    advantages: np.ndarray
    attention: np.ndarray

    def __getitem__(self, action) -> float:
        return float(self.values[int(action)])


@dataclass(frozen=True)
class QStep:
    """Differentiable critic output for one prefix."""
    q: tc.Tensor
    state_value: tc.Tensor
    advantages: tc.Tensor
    attention: tc.Tensor

    def to_vector(self) -> QVector:
        return QVector(self.q.numpy(), self.state_value.item(), self.advantages.numpy(), self.attention.numpy())


@dataclass(frozen=True)
class CriticSample:
    """One experience prepared for the critic: Q(ŷ_t; X̂_{1..t}, X) is regressed onto targets[t-1]."""
    ground_truth: Trajectory
    cells: Tuple[Cell, ...]
    actions: Tuple[Action, ...]
    targets: Tuple[float, ...]

    def __post_init__(self):
        if not len(self.actions) == len(self.targets) == len(self.cells) - 1:
            raise ContractError("critic sample needs one action and one target per step")
        if not all(np.isfinite(self.targets)):
            raise ContractError("critic targets must be finite")


class QValueEstimator:
    """
    Critic: an LSTM over the ground truth gives annotations; a second LSTM runs over
    the reconstruction prefix and attends over them with a bilinear score. The
    attended context and decoder state go through one tanh layer and a dueling
    head Q(a) = V + A(a) - mean A.
    """

    def __init__(self, config: CriticConfig, net: RoadNetwork, table: EmbeddingTable,
                 params: Optional[tc.ParameterStore] = None, seed=0):
        if table.dim != config.embed_dim:
            raise ContractError(f"embedding dim {table.dim} does not match configured {config.embed_dim}")
        self.config = config
        self.net = net
        self.inputs = Actor.CellInputs(net, table)
        self.params = params if params is not None else self.init_params(seed)

    def init_params(self, seed) -> tc.ParameterStore:
        rng = TrepPlatform.as_rng(seed)
        cfg = self.config
        n = cfg.attention_size
        store = tc.ParameterStore()
        Actor.add_lstm(store, "crit_enc", cfg.embed_dim, n, rng)
        Actor.add_lstm(store, "crit_dec", cfg.embed_dim, n, rng)
        store.add_uniform("att/W", (n, n), n, rng)
        store.add_uniform("hid/W", (2 * n, cfg.hidden_size), 2 * n, rng)
        store.add_uniform("hid/b", (cfg.hidden_size,), 2 * n, rng)
        store.add_uniform("val/W", (cfg.hidden_size,), cfg.hidden_size, rng)
        store.add_uniform("val/b", (), cfg.hidden_size, rng)
        store.add_uniform("adv/W", (cfg.hidden_size, NUM_ACTIONS), cfg.hidden_size, rng)
        store.add_uniform("adv/b", (NUM_ACTIONS,), cfg.hidden_size, rng)
        return store

    def _store(self, params):
        return self.params if params is None else params

    def critic_encode(self, ground_truth: Trajectory, params: Optional[tc.ParameterStore] = None) -> List[tc.Tensor]:
        if len(ground_truth.cells) < 1:
            raise ContractError("cannot encode an empty trajectory")
        store = self._store(params)
        xs = [self.inputs.cell(store, cell) for cell in ground_truth.cells]
        return Actor.lstm_run(store, "crit_enc", xs, self.config.attention_size)

    def head(self, state: tc.Tensor, annotations: tc.Tensor, store: tc.ParameterStore) -> QStep:
        scores = tc.matmul(annotations, tc.matmul(store["att/W"], state))
        weights = tc.softmax(scores)
        context = tc.matmul(weights, annotations)
        hidden = tc.tanh(tc.add(tc.matmul(tc.concat([state, context]), store["hid/W"]), store["hid/b"]))
        value = tc.add(tc.matmul(hidden, store["val/W"]), store["val/b"])
        advantages = tc.add(tc.matmul(hidden, store["adv/W"]), store["adv/b"])
        q = tc.add(advantages, tc.expand(tc.sub(value, tc.mean(advantages)), NUM_ACTIONS))
        return QStep(q, value, advantages, weights)

    def q_sequence(self, annotations: Sequence[tc.Tensor], cells: Sequence[Cell],
                   params: Optional[tc.ParameterStore] = None) -> List[QStep]:
        """Q-vectors for every prefix X̂_{1..t}, t = 1..len(cells), in one decoder pass."""
        if not cells:
            raise ContractError("the reconstruction prefix must not be empty")
        store = self._store(params)
        matrix = tc.stack(list(annotations))
        state = Actor.lstm_zero_state(self.config.attention_size)
        steps = []
        for cell in cells:
            state = Actor.lstm_step(store, "crit_dec", self.inputs.cell(store, cell), state)
            steps.append(self.head(state[0], matrix, store))
        return steps

    def q_values(self, annotations: Sequence[tc.Tensor], prefix: Sequence[Cell],
                 params: Optional[tc.ParameterStore] = None) -> QVector:
        return self.q_sequence(annotations, prefix, params)[-1].to_vector()

    def critic_loss(self, batch: Sequence[CriticSample], params: Optional[tc.ParameterStore] = None) -> tc.Tensor:
        """sum over samples and steps of (Q(ŷ_t; X̂_{1..t}, X) - q_t)^2; targets are constants."""
        store = self._store(params)
        terms = []
        for sample in batch:
            if len(sample.actions) == 0:
                continue
            annotations = self.critic_encode(sample.ground_truth, store)
            steps = self.q_sequence(annotations, sample.cells[:-1], store)
            for step, action, target in zip(steps, sample.actions, sample.targets):
                terms.append(tc.square(tc.sub(tc.take(step.q, int(action)), tc.constant(target))))
        if not terms:
            return tc.constant(0.0)
        return tc.sum_(tc.stack(terms))


def reward(x_next: Cell, x_hat_next: Cell, delta: int, net: RoadNetwork) -> int:
    d = net.distances[net.vertex(x_next), net.vertex(x_hat_next)]
    return 0 if d <= delta else -1


def step_rewards(ground_truth: Sequence[Cell], reconstruction: Sequence[Cell], delta: int,
                 net: RoadNetwork) -> List[int]:
    if len(ground_truth) != len(reconstruction):
        raise ContractError(f"lengths differ: {len(ground_truth)} vs {len(reconstruction)}")
    return [reward(ground_truth[t], reconstruction[t], delta, net) for t in range(1, len(ground_truth))]


def total_reward(ground_truth: Sequence[Cell], reconstruction: Sequence[Cell], delta: int, net: RoadNetwork) -> int:
    return sum(step_rewards(cells_of(ground_truth), cells_of(reconstruction), delta, net))


def cells_of(x) -> Tuple[Cell, ...]:
    return tuple(x.cells) if hasattr(x, "cells") else tuple(x)


def reward_to_go(rewards: Sequence[int]) -> List[float]:
    """Monte-Carlo returns: element t is the sum of rewards from step t to the end."""
    returns = np.cumsum(np.asarray(rewards, dtype=np.float64)[::-1])[::-1]
    return [float(r) for r in returns]


def monte_carlo_value(actor: 'Actor.TrajectoryAutoencoder', c, ground_truth, prefix: Sequence[Cell],
                      rollouts: int, seed, delta: int, net: RoadNetwork,
                      params: Optional[tc.ParameterStore] = None) -> float:
    """
    Average future reward sum over continuations sampled from the actor's policy
    after the prefix X̂_{1..t}.
    """
    if rollouts < 1:
        raise ContractError("rollouts must be at least 1")
    X = cells_of(ground_truth)
    prefix = [tuple(cell) for cell in prefix]
    if not prefix or prefix[0] != X[0] or len(prefix) > len(X):
        raise ContractError("prefix must start at x_1 and be no longer than the ground truth")
    rng = TrepPlatform.as_rng(seed)
    if not isinstance(c, tc.Tensor):
        c = tc.constant(c.vector if isinstance(c, Actor.Representation) else c)

    # the decoder is deterministic given the cells fed so far, so policies are memoized per path
    memo: Dict[Tuple[Cell, ...], Tuple[Actor.LstmState, np.ndarray]] = {}

    def policy_after(path: Tuple[Cell, ...]):
        if path not in memo:
            state = memo[path[:-1]][0] if len(path) > 1 else actor.initial_state()
            state, policy = actor.decode_step(state, path[-1], c, params)
            memo[path] = (state, policy.value)
        return memo[path][1]

    for k in range(1, len(prefix) + 1):
        policy_after(tuple(prefix[:k]))

    t = len(prefix)
    total = 0.0
    for _ in range(rollouts):
        path = tuple(prefix)
        future = 0
        for tau in range(t, len(X)):
            p = policy_after(path)
            action = int(rng.choice(NUM_ACTIONS, p=p))
            nxt = net.step(path[-1], Action(action))
            future += reward(X[tau], nxt, delta, net)
            path = path + (nxt,)
        total += future
    return total / rollouts


def expected_q(policy: np.ndarray, q: np.ndarray) -> float:
    """sum_a p(a) Q(a) over the policy support only."""
    support = policy > 0
    return float(np.dot(policy[support], np.asarray(q)[support]))


def bellman_target(r: float, next_policy: Optional[np.ndarray], next_q: Optional[np.ndarray], terminal: bool) -> float:
    if terminal:
        return float(r)
    p = np.asarray(next_policy, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ContractError("next-step policy must be a probability vector")
    return float(r) + expected_q(p, next_q)
