import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import GridNetwork  # noqa: E402
from GraphEmbed import EmbeddingTable  # noqa: E402
import Actor  # noqa: E402
import Critic  # noqa: E402

# 3x3 layout with one obstacle and one wall: vertices v0 (0,0), v1 (1,0), v2 (2,0),
# v4 (0,1), v5 (1,1), v7 (0,2) counted by column; (2,1) is an
# obstacle and a wall separates v1 from v5.
WALLED_MAP = "...\n...\n.#.\n"
WALLED_WALLS = "1,0-1,1\n"

TWO_CORRIDOR_6 = (
    "......\n"
    ".####.\n"
    "......\n"
    "......\n"
    ".####.\n"
    "......\n"
)

TWO_CORRIDOR_12 = (
    "............\n"
    "............\n"
    "..########..\n"
    "..########..\n"
    "............\n"
    "............\n"
    "............\n"
    "............\n"
    "..########..\n"
    "..########..\n"
    "............\n"
    "............\n"
)


def network_from_text(grid_text: str, walls_text: str = "", alpha: float = 3.0) -> GridNetwork.RoadNetwork:
    occupancy, height, width = GridNetwork.parse_occupancy_text(grid_text, walls_text)
    return GridNetwork.build_network(occupancy, GridNetwork.GridSpec((0.0, 0.0), alpha, width, height))


def open_grid(height: int, width: int) -> GridNetwork.RoadNetwork:
    return network_from_text(("." * width + "\n") * height)


def random_table(net: GridNetwork.RoadNetwork, dim: int = 4, seed: int = 0) -> EmbeddingTable:
    return EmbeddingTable(np.random.default_rng(seed).normal(size=(len(net), dim)), net.hash)


@pytest.fixture
def walled_net():
    return network_from_text(WALLED_MAP, WALLED_WALLS)


@pytest.fixture
def grid5():
    return open_grid(5, 5)


@pytest.fixture
def corridor_net():
    return network_from_text(TWO_CORRIDOR_6)


@pytest.fixture
def tiny_actor_config():
    return Actor.ActorConfig(repr_dim=6, decoder_size=5, embed_dim=4)


@pytest.fixture
def tiny_critic_config():
    return Critic.CriticConfig(hidden_size=8, attention_size=5, embed_dim=4)


@pytest.fixture
def tiny_actor(grid5, tiny_actor_config):
    return Actor.TrajectoryAutoencoder(tiny_actor_config, grid5, random_table(grid5), seed=1)


@pytest.fixture
def tiny_critic(grid5, tiny_critic_config):
    return Critic.QValueEstimator(tiny_critic_config, grid5, random_table(grid5), seed=2)


def lstm_reference(W, b, x, h, mem):
    """One LSTM step in plain numpy, gates ordered input, forget, candidate, output."""
    def sigmoid(z):
        return 1.0 / (1.0 + np.exp(-z))

    z = np.concatenate([x, h]) @ W + b
    n = len(h)
    i, f, g, o = sigmoid(z[:n]), sigmoid(z[n:2 * n]), np.tanh(z[2 * n:3 * n]), sigmoid(z[3 * n:])
    mem = f * mem + i * g
    return o * np.tanh(mem), mem
