import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

import TrepPlatform
from TrepPlatform import ConfigError, ContractError
from GridNetwork import UNREACHABLE, Action, GridSpec, RoadNetwork, Trajectory, cell_center
from GraphEmbed import EmbeddingTable
import Actor
import Trainer
import TensorCore as tc


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray  # (N,), cluster of each trajectory
    centers: np.ndarray  # (K, D)
    medoids: Tuple[int, ...]  # member index per cluster, -1 for an empty cluster

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        k = len(self.centers)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ContractError("cluster labels must lie in [0, K)")
        for cluster, medoid in enumerate(self.medoids):
            if medoid >= 0 and labels[medoid] != cluster:
                raise ContractError(f"medoid {medoid} is not a member of cluster {cluster}")
        object.__setattr__(self, 'labels', labels)

    @property
    def k(self) -> int:
        return len(self.centers)

    def medoid_of(self, i: int) -> int:
        return self.medoids[self.labels[i]]


def trajectory_error(a: Trajectory, b: Trajectory, net: RoadNetwork):
    """Best alignment of the shorter trajectory inside the longer: min over offsets of summed hop distances."""
    if len(a) > len(b):
        a, b = b, a
    d = net.distances[np.ix_(net.vertices(a.cells), net.vertices(b.cells))]
    n = len(a)
    best = min(float(np.trace(d[:, offset:offset + n])) for offset in range(len(b) - n + 1))
    return UNREACHABLE if math.isinf(best) else int(best)


def _int_seed(seed) -> int:
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(2 ** 31 - 1))
    return int(seed)


def kmeans_cluster(representations: np.ndarray, k: int, seed=0, restarts: int = 1,
                   max_iter: int = 100) -> ClusterAssignment:
    """
    k-means++ on the representations; each cluster's medoid is the member whose
    representation is nearest its center.
    """
    features = np.asarray(representations, dtype=np.float64)
    if features.ndim != 2:
        raise ContractError("representations must form an (N, D) matrix")
    if not 1 <= k <= len(features):
        raise ContractError(f"K={k} must lie in 1..{len(features)}")
    model = KMeans(n_clusters=k, init="k-means++", n_init=restarts, max_iter=max_iter,
                   random_state=_int_seed(seed)).fit(features)
    centers = model.cluster_centers_
    labels = model.labels_

    medoids = []
    for cluster in range(k):
        members = np.where(labels == cluster)[0]
        if members.size == 0:
            medoids.append(-1)
            continue
        dists = np.linalg.norm(features[members] - centers[cluster], axis=1)
        medoids.append(int(members[np.argmin(dists)]))
    return ClusterAssignment(labels, centers, tuple(medoids))


def wcse(assignment: ClusterAssignment, trajectories: Sequence[Trajectory], net: RoadNetwork):
    if len(assignment.labels) != len(trajectories):
        raise ContractError("assignment does not cover every trajectory")
    return sum(trajectory_error(traj, trajectories[assignment.medoid_of(i)], net)
               for i, traj in enumerate(trajectories))


def wcse_curve(representations: np.ndarray, trajectories: Sequence[Trajectory], ks: Iterable[int],
               net: RoadNetwork, seed=0, restarts: int = 1) -> pd.DataFrame:
    rows = []
    for k in ks:
        assignment = kmeans_cluster(representations, k, seed, restarts)
        rows.append({"K": int(k), "WCSE": wcse(assignment, trajectories, net)})
    return pd.DataFrame(rows, columns=["K", "WCSE"])


def adjusted_rand_index(assignment: ClusterAssignment, labels: Sequence[str]) -> float:
    if len(labels) != len(assignment.labels):
        raise ContractError("one ground-truth label per trajectory is needed")
    return float(adjusted_rand_score(list(labels), assignment.labels))


def dft_representation(coordinates: np.ndarray, dim: int) -> np.ndarray:
    """
    Lowest dim/4 Fourier coefficients of the x and of the y sequence, divided by T,
    as (real, imaginary) pairs: the x block first, then the y block. Missing
    coefficients of short sequences are zero.
    """
    if dim < 4 or dim % 4:
        raise ConfigError(f"DFT dimension {dim} must be a positive multiple of 4")
    coords = np.asarray(coordinates, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2 or len(coords) < 1:
        raise ContractError("coordinates must be a non-empty (T, 2) array")
    n = dim // 4
    T = len(coords)
    blocks = []
    for axis in range(2):
        spectrum = np.fft.fft(coords[:, axis])[:n] / T
        coefficients = np.zeros(n, dtype=np.complex128)
        coefficients[:len(spectrum)] = spectrum
        blocks.append(np.column_stack([coefficients.real, coefficients.imag]).ravel())
    return np.concatenate(blocks)


def dft_encode(traj: Trajectory, spec: GridSpec, dim: int = 64) -> np.ndarray:
    return dft_representation(np.array([cell_center(cell, spec) for cell in traj.cells]), dim)


class CssrnnModel(Actor.TrajectoryAutoencoder):
    """
    Same encoder and decoder as the actor, but the decoder scores next cells: every
    vertex has an output row, and a step gathers the rows of the cells reachable
    in one move, normalized over those candidates only.
    """

    def init_params(self, seed, freeze_embeddings: bool = True) -> tc.ParameterStore:
        rng = TrepPlatform.as_rng(seed)
        cfg = self.config
        store = tc.ParameterStore()
        Actor.add_lstm(store, "enc_fwd", cfg.embed_dim, cfg.encoder_size, rng)
        Actor.add_lstm(store, "enc_bwd", cfg.embed_dim, cfg.encoder_size, rng)
        Actor.add_lstm(store, "dec", cfg.embed_dim + cfg.repr_dim, cfg.decoder_hidden, rng)
        store.add_uniform("cell_out/W", (len(self.net), cfg.decoder_hidden), cfg.decoder_hidden, rng)
        store.add_uniform("cell_out/b", (len(self.net),), cfg.decoder_hidden, rng)
        if not freeze_embeddings:
            store.add("embedding", self.inputs.table.vectors.copy())
        return store

    def decode_step(self, state: Actor.LstmState, cell, c, params: Optional[tc.ParameterStore] = None
                    ) -> Tuple[Actor.LstmState, tc.Tensor]:
        store = self._store(params)
        c = c if isinstance(c, tc.Tensor) else tc.constant(c.vector if isinstance(c, Actor.Representation) else c)
        vertex = self.net.vertex(cell)
        state = Actor.lstm_step(store, "dec", tc.concat([self.inputs(store, vertex), c]), state)
        # illegal actions gather the current cell's row and are masked out below
        candidates = np.where(self.net.successor[vertex] >= 0, self.net.successor[vertex], vertex)
        logits = tc.add(tc.matmul(tc.take(store["cell_out/W"], candidates), state[0]),
                        tc.take(store["cell_out/b"], candidates))
        return state, tc.masked_softmax(logits, self.net.masks[vertex])

    def next_cell_distribution(self, c, prefix: Sequence, params: Optional[tc.ParameterStore] = None) -> Dict:
        """Probability of each next cell after feeding the prefix."""
        policies, _ = self.decode_along(c, prefix, params)
        vertex = self.net.vertex(prefix[-1])
        return {self.net.cells[int(u)]: float(p) for u, p in zip(self.net.successor[vertex], policies[-1].value)
                if u >= 0}


def cssrnn_baseline(corpus: Sequence[Trajectory], net: RoadNetwork, table: EmbeddingTable,
                    config: TrepPlatform.TrepConfig, quiet: bool = True) -> CssrnnModel:
    model = CssrnnModel(Actor.ActorConfig.from_config(config), net, table,
                        seed=TrepPlatform.component_seed(config.seed, "baseline"),
                        freeze_embeddings=config.freeze_embeddings)
    Trainer.pretrain_actor(model, corpus, Trainer.TrainConfig.from_config(config), quiet=quiet)
    return model


def trep_ll_baseline(corpus: Sequence[Trajectory], net: RoadNetwork, table: EmbeddingTable,
                     config: TrepPlatform.TrepConfig, quiet: bool = True) -> Actor.TrajectoryAutoencoder:
    """The actor trained by maximum likelihood only."""
    model = Actor.TrajectoryAutoencoder(Actor.ActorConfig.from_config(config), net, table,
                                        seed=TrepPlatform.component_seed(config.seed, "actor_init"),
                                        freeze_embeddings=config.freeze_embeddings)
    Trainer.pretrain_actor(model, corpus, Trainer.TrainConfig.from_config(config), quiet=quiet)
    return model


def rejoin_horizon(ground_truth: Sequence, reconstruction: Sequence, after: int, delta: int, net: RoadNetwork):
    """Steps from cell index `after` until the reconstruction is within delta hops of the ground truth again."""
    for k in range(len(ground_truth) - after):
        i = after + k
        if net.distances[net.vertex(ground_truth[i]), net.vertex(reconstruction[i])] <= delta:
            return k
    return UNREACHABLE


def recoverability_experiment(model: Actor.TrajectoryAutoencoder, traj: Trajectory,
                              interventions: Dict[int, Action], net: RoadNetwork, delta: int = 0):
    """
    Greedy reconstruction with forced actions at the given 1-based steps; returns the
    rejoin horizon after the last intervention.
    """
    c = model.encode_tensor(traj)
    recon = model.forced_decode(c, traj.cells[0], len(traj), interventions)
    after = max(interventions) if interventions else 0
    if after >= len(traj):
        raise ContractError(f"intervention step {after} is beyond the last step {len(traj) - 1}")
    return rejoin_horizon(traj.cells, recon.cells, after, delta, net)


def wrong_action(net: RoadNetwork, traj: Trajectory, step: int, rng: np.random.Generator) -> Optional[Action]:
    """A random legal action at step that leaves the ground-truth path, or None when none exists."""
    here, there = traj.cells[step - 1], traj.cells[step]
    options = [a for a in net.legal_actions(here) if net.step(here, a) != there]
    return options[int(rng.integers(len(options)))] if options else None


def perturbation_trials(model: Actor.TrajectoryAutoencoder, corpus: Sequence[Trajectory], net: RoadNetwork,
                        step: int = 3, delta: int = 0, seed=0, name: str = "trep") -> List[Dict]:
    """One forced wrong action at step per trajectory; one record per trajectory long enough."""
    rng = TrepPlatform.as_rng(seed)
    records = []
    for i, traj in enumerate(corpus):
        if len(traj) <= step:
            continue
        action = wrong_action(net, traj, step, rng)
        if action is None:
            continue
        horizon = recoverability_experiment(model, traj, {step: action}, net, delta)
        records.append({"model": name, "trajectory": i, "label": traj.label, "step": step,
                        "action": action.name, "horizon": None if math.isinf(horizon) else int(horizon)})
    return records
