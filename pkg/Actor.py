from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import TrepPlatform
from TrepPlatform import ContractError, DataError
from GridNetwork import Action, Cell, NUM_ACTIONS, RoadNetwork, Trajectory
from GraphEmbed import EmbeddingTable
import TensorCore as tc

GREEDY = "greedy"
SAMPLE = "sample"
EPSILON_GREEDY = "epsilon_greedy"
MODES = (GREEDY, SAMPLE, EPSILON_GREEDY)


@dataclass(frozen=True)
class ActorConfig:
    repr_dim: int = 64  # D
    decoder_size: Optional[int] = None  # defaults to D
    embed_dim: int = 32

    def __post_init__(self):
        if self.repr_dim < 2 or self.repr_dim % 2:
            raise ContractError("repr_dim must be even and at least 2")
        if self.decoder_size is not None and self.decoder_size < 1:
            raise ContractError("decoder_size must be positive")
        if self.embed_dim < 1:
            raise ContractError("embed_dim must be positive")

    @property
    def encoder_size(self) -> int:
        return self.repr_dim // 2

    @property
    def decoder_hidden(self) -> int:
        return self.decoder_size or self.repr_dim

    @classmethod
    def from_config(cls, config: TrepPlatform.TrepConfig) -> 'ActorConfig':
        return cls(config.repr_dim, config.decoder_size, config.embed_dim)


@dataclass(frozen=True)
class Representation:
    vector: np.ndarray

    def __post_init__(self):
        vector = np.array(self.vector, dtype=np.float64)
        TrepPlatform.check_finite(vector, "representation")
        vector.setflags(write=False)
        object.__setattr__(self, 'vector', vector)

    def __len__(self):
        return self.vector.shape[0]


@dataclass(frozen=True)
class Reconstruction:
    cells: Tuple[Cell, ...]
    actions: Tuple[Action, ...]
    policies: Tuple[np.ndarray, ...]

    def to_trajectory(self, label: Optional[str] = None) -> Trajectory:
        return Trajectory(self.cells, self.actions, label)

    def __len__(self):
        return len(self.cells)


# LSTM memory is called `mem` throughout so it is not confused with the representation c.
LstmState = Tuple[tc.Tensor, tc.Tensor]


def add_lstm(store: tc.ParameterStore, prefix: str, input_size: int, hidden_size: int, rng: np.random.Generator):
    fan_in = input_size + hidden_size
    store.add_uniform(f"{prefix}/W", (fan_in, 4 * hidden_size), fan_in, rng)
    store.add_uniform(f"{prefix}/b", (4 * hidden_size,), fan_in, rng)


def lstm_zero_state(hidden_size: int) -> LstmState:
    return tc.constant(np.zeros(hidden_size)), tc.constant(np.zeros(hidden_size))


def lstm_step(store: tc.ParameterStore, prefix: str, x: tc.Tensor, state: LstmState) -> LstmState:
    h, mem = state
    n = h.shape[0]
    z = tc.add(tc.matmul(tc.concat([x, h]), store[f"{prefix}/W"]), store[f"{prefix}/b"])
    i = tc.sigmoid(tc.slice_(z, 0, n))
    f = tc.sigmoid(tc.slice_(z, n, 2 * n))
    g = tc.tanh(tc.slice_(z, 2 * n, 3 * n))
    o = tc.sigmoid(tc.slice_(z, 3 * n, 4 * n))
    mem = tc.add(tc.mul(f, mem), tc.mul(i, g))
    return tc.mul(o, tc.tanh(mem)), mem


def lstm_run(store: tc.ParameterStore, prefix: str, inputs: Sequence[tc.Tensor], hidden_size: int) -> List[tc.Tensor]:
    state = lstm_zero_state(hidden_size)
    outputs = []
    for x in inputs:
        state = lstm_step(store, prefix, x, state)
        outputs.append(state[0])
    return outputs


class CellInputs:
    """Cell embedding lookup, frozen (a constant table) or trainable (a parameter row gather)."""

    def __init__(self, net: RoadNetwork, table: EmbeddingTable):
        table.check_network(net)
        self.net = net
        self.table = table
        self._constants = [tc.constant(row) for row in table.vectors]

    def __call__(self, store: tc.ParameterStore, vertex: int) -> tc.Tensor:
        if "embedding" in store:
            return tc.take(store["embedding"], vertex)
        return self._constants[vertex]

    def cell(self, store: tc.ParameterStore, cell: Cell) -> tc.Tensor:
        return self(store, self.net.vertex(cell))


class TrajectoryAutoencoder:
    """
    Bidirectional LSTM encoder producing c = [h^F_T, h^B_T] and an LSTM decoder
    conditioned on c at every step, emitting a masked softmax over actions.
    Operations take the parameter store explicitly so delayed copies can share
    the structure; `params` is the online store.
    """

    def __init__(self, config: ActorConfig, net: RoadNetwork, table: EmbeddingTable,
                 params: Optional[tc.ParameterStore] = None, seed=0, freeze_embeddings: bool = True):
        if table.dim != config.embed_dim:
            raise ContractError(f"embedding dim {table.dim} does not match configured {config.embed_dim}")
        self.config = config
        self.net = net
        self.inputs = CellInputs(net, table)
        self.params = params if params is not None else self.init_params(seed, freeze_embeddings)

    def init_params(self, seed, freeze_embeddings: bool = True) -> tc.ParameterStore:
        rng = TrepPlatform.as_rng(seed)
        cfg = self.config
        store = tc.ParameterStore()
        add_lstm(store, "enc_fwd", cfg.embed_dim, cfg.encoder_size, rng)
        add_lstm(store, "enc_bwd", cfg.embed_dim, cfg.encoder_size, rng)
        add_lstm(store, "dec", cfg.embed_dim + cfg.repr_dim, cfg.decoder_hidden, rng)
        store.add_uniform("out/W", (cfg.decoder_hidden, NUM_ACTIONS), cfg.decoder_hidden, rng)
        store.add_uniform("out/b", (NUM_ACTIONS,), cfg.decoder_hidden, rng)
        if not freeze_embeddings:
            store.add("embedding", self.inputs.table.vectors.copy())
        return store

    def _store(self, params: Optional[tc.ParameterStore]) -> tc.ParameterStore:
        return self.params if params is None else params

    def encode_tensor(self, traj: Trajectory, params: Optional[tc.ParameterStore] = None) -> tc.Tensor:
        if len(traj.cells) < 1:
            raise ContractError("cannot encode an empty trajectory")
        store = self._store(params)
        xs = [self.inputs.cell(store, cell) for cell in traj.cells]
        size = self.config.encoder_size
        forward = lstm_run(store, "enc_fwd", xs, size)[-1]
        backward = lstm_run(store, "enc_bwd", xs[::-1], size)[-1]
        return tc.concat([forward, backward])

    def encode(self, traj: Trajectory, params: Optional[tc.ParameterStore] = None) -> Representation:
        return Representation(self.encode_tensor(traj, params).value)

    def initial_state(self) -> LstmState:
        return lstm_zero_state(self.config.decoder_hidden)

    def decode_step(self, state: LstmState, cell: Cell, c, params: Optional[tc.ParameterStore] = None
                    ) -> Tuple[LstmState, tc.Tensor]:
        """h_t = f(h_{t-1}, embed(x̂_t), c); policy = masked_softmax(W h_t + b, M_{x̂_t})."""
        store = self._store(params)
        c = c if isinstance(c, tc.Tensor) else tc.constant(c.vector if isinstance(c, Representation) else c)
        vertex = self.net.vertex(cell)
        x = tc.concat([self.inputs(store, vertex), c])
        state = lstm_step(store, "dec", x, state)
        logits = tc.add(tc.matmul(state[0], store["out/W"]), store["out/b"])
        return state, tc.masked_softmax(logits, self.net.masks[vertex])

    def decode_along(self, c, cells: Sequence[Cell], params: Optional[tc.ParameterStore] = None
                     ) -> Tuple[List[tc.Tensor], LstmState]:
        """Feed the given cells to the decoder; returns the policy at each of them and the last state."""
        state = self.initial_state()
        policies = []
        for cell in cells:
            state, policy = self.decode_step(state, cell, c, params)
            policies.append(policy)
        return policies, state

    def reconstruct(self, c, start: Cell, length: int, mode: str = GREEDY, epsilon: float = 0.0, seed=None,
                    params: Optional[tc.ParameterStore] = None, overrides: Optional[Dict[int, Action]] = None,
                    prefix: Sequence[Cell] = ()) -> Reconstruction:
        """
        Run the decoder from x_1 for length cells. Actions are picked by mode;
        overrides maps a 1-based step t to the forced action ŷ_t.
        A non-empty prefix (starting with start) is fed verbatim before picking resumes.
        """
        if mode not in MODES:
            raise ContractError(f"unknown decoding mode {mode}")
        if length < 1:
            raise ContractError("reconstruction length must be at least 1")
        if start not in self.net:
            raise ContractError(f"start cell {start} is not a vertex of the road network")
        rng = TrepPlatform.as_rng(seed) if mode != GREEDY else None
        overrides = overrides or {}
        prefix = list(prefix)
        if prefix and tuple(prefix[0]) != tuple(start):
            raise ContractError("prefix must begin at the start cell")

        cells = [tuple(start)]
        actions: List[Action] = []
        policies: List[np.ndarray] = []
        state = self.initial_state()
        for t in range(1, length):
            state, policy = self.decode_step(state, cells[-1], c, params)
            p = policy.value
            policies.append(p)
            if t < len(prefix):
                action = self._action_between(cells[-1], prefix[t])
            elif t in overrides:
                action = Action(overrides[t])
                if self.net.masks[self.net.vertex(cells[-1])][action] == 0:
                    raise ContractError(f"override {action.name} at step {t} is illegal at {cells[-1]}")
            else:
                action = self._choose(p, cells[-1], mode, epsilon, rng)
            actions.append(action)
            cells.append(self.net.step(cells[-1], action))
        return Reconstruction(tuple(cells), tuple(actions), tuple(policies))

    def _action_between(self, a: Cell, b: Cell) -> Action:
        v = self.net.vertex(a)
        matches = np.flatnonzero(self.net.successor[v] == self.net.vertex(b))
        if matches.size == 0:
            raise ContractError(f"prefix step {a} -> {b} is illegal")
        return Action(int(matches[0]))

    def _choose(self, p: np.ndarray, cell: Cell, mode: str, epsilon: float, rng) -> Action:
        if mode == GREEDY:
            return Action(int(np.argmax(p)))
        if mode == SAMPLE:
            return Action(int(rng.choice(NUM_ACTIONS, p=p)))
        if rng.random() < epsilon:
            legal = np.flatnonzero(self.net.masks[self.net.vertex(cell)])
            return Action(int(rng.choice(legal)))
        return Action(int(np.argmax(p)))

    def forced_decode(self, c, start: Cell, length: int, overrides: Dict[int, Action],
                      params: Optional[tc.ParameterStore] = None) -> Reconstruction:
        return self.reconstruct(c, start, length, GREEDY, params=params, overrides=overrides)

    def mll_loss(self, traj: Trajectory, params: Optional[tc.ParameterStore] = None,
                 mode: str = "teacher_forcing") -> tc.Tensor:
        """
        -sum_t log p(y_t | ., c). Teacher forcing feeds ground-truth cells; free running
        feeds the greedy reconstruction and scores y_t only while it still matches X.
        """
        if mode not in ("teacher_forcing", "free_running"):
            raise ContractError(f"unknown likelihood mode {mode}")
        traj = traj.with_actions()
        store = self._store(params)
        c = self.encode_tensor(traj, store)
        terms = []
        state = self.initial_state()
        current = traj.cells[0]
        for t, y in enumerate(traj.actions):
            if mode == "free_running" and current != traj.cells[t]:
                break
            vertex = self.net.vertex(current)
            if self.net.masks[vertex][y] == 0:
                raise DataError(f"ground-truth action {y.name} at step {t + 1} is illegal at {current}")
            state, policy = self.decode_step(state, current, c, store)
            terms.append(tc.log(tc.take(policy, int(y))))
            if mode == "free_running":
                current = self.net.step(current, Action(int(np.argmax(policy.value))))
            else:
                current = traj.cells[t + 1]
        if not terms:
            return tc.constant(0.0)
        return tc.neg(tc.sum_(tc.stack(terms)))

    def greedy_matches(self, traj: Trajectory, params: Optional[tc.ParameterStore] = None) -> bool:
        c = self.encode_tensor(traj, params)
        return self.reconstruct(c, traj.cells[0], len(traj), GREEDY, params=params).cells == traj.cells
