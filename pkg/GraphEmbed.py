import zlib
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from gensim.models import Word2Vec
from tqdm import tqdm

import TrepPlatform
from TrepPlatform import ContractError, DataError
from GridNetwork import Cell, RoadNetwork
import TensorCore as tc

DEFAULT_EMBED_DIM = 32


@dataclass(frozen=True)
class EmbeddingTable:
    vectors: np.ndarray  # (N, E), row v belongs to network vertex v
    map_hash: str

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ContractError("embedding vectors must form an (N, E) matrix")
        TrepPlatform.check_finite(vectors, "embedding table")
        vectors.setflags(write=False)
        object.__setattr__(self, 'vectors', vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def check_network(self, net: RoadNetwork):
        if self.map_hash != net.hash or len(self) != len(net):
            raise DataError("embedding table was trained on a different map; rebuild it with the embed command")


def _token_hash(token: str) -> int:
    # Word2Vec seeds each vector from hash(token + seed); a fixed hash keeps that stable across processes.
    return zlib.crc32(token.encode("utf-8"))


def sample_walks(net: RoadNetwork, walks_per_cell: int, walk_length: int, rng: np.random.Generator,
                 quiet: bool = True) -> List[List[str]]:
    """Uniform random walks over moves to other cells; a cell without neighbors repeats itself."""
    neighbors = [[int(u) for u in net.successor[v] if u >= 0 and u != v] for v in range(len(net))]
    walks = []
    for _ in tqdm(range(walks_per_cell), desc="walks", disable=quiet):
        for start in rng.permutation(len(net)):
            v = int(start)
            walk = [str(v)]
            for _ in range(walk_length - 1):
                if neighbors[v]:
                    v = neighbors[v][int(rng.integers(len(neighbors[v])))]
                walk.append(str(v))
            walks.append(walk)
    return walks


@TrepPlatform.disk_cache()
def train_embeddings(net: RoadNetwork, walks_per_cell: int = 10, walk_length: int = 40, window: int = 5,
                     negatives: int = 5, epochs: int = 5, seed: int = 0, dim: int = DEFAULT_EMBED_DIM,
                     quiet: bool = True) -> EmbeddingTable:
    """
    DeepWalk-style skip-gram with negative sampling over uniform walks
    (node2vec with return and in-out parameters both 1).
    """
    if len(net) == 0:
        raise ContractError("cannot embed an empty network")
    rng = np.random.default_rng(seed)
    walks = sample_walks(net, walks_per_cell, walk_length, rng, quiet)
    TrepPlatform.log(f"Training {dim}-dim cell embeddings on {len(walks)} walks over {len(net)} cells.")
    model = Word2Vec(
        sentences=walks,
        vector_size=dim,
        window=window,
        min_count=1,
        sg=1,
        hs=0,
        negative=negatives,
        sample=0,
        epochs=epochs,
        workers=1,
        seed=seed,
        hashfxn=_token_hash,
    )
    vectors = np.stack([model.wv[str(v)] for v in range(len(net))]).astype(np.float64)
    return EmbeddingTable(vectors, net.hash)


def embeddings_for(net: RoadNetwork, config: TrepPlatform.TrepConfig, cache_dir: Optional[str] = None,
                   quiet: bool = True) -> EmbeddingTable:
    seed = TrepPlatform.component_int_seed(config.seed, "embedding")
    key = TrepPlatform.sha256_text(net.hash, TrepPlatform.stable_json(
        [config.walks_per_cell, config.walk_length, config.window, config.negatives,
         config.embed_epochs, seed, config.embed_dim]))
    return train_embeddings(net, config.walks_per_cell, config.walk_length, config.window, config.negatives,
                            config.embed_epochs, seed, config.embed_dim, quiet,
                            cache_dir=cache_dir, cache_key=key)


def embed(table: EmbeddingTable, net: RoadNetwork, cell: Cell) -> np.ndarray:
    if cell not in net:
        raise ContractError(f"cell {cell} has no embedding")
    return table.vectors[net.vertex(cell)]


def save_embeddings(path: str, table: EmbeddingTable):
    tc.write_npz(path, {"vectors": table.vectors, "map_hash": np.array(table.map_hash)})


def load_embeddings(path: str, net: Optional[RoadNetwork] = None) -> EmbeddingTable:
    try:
        with np.load(path, allow_pickle=False) as archive:
            table = EmbeddingTable(archive["vectors"], str(archive["map_hash"]))
    except FileNotFoundError:
        raise DataError(f"embedding table not found: {path}")
    except KeyError:
        raise DataError(f"{path} is not an embedding table")
    if net is not None:
        table.check_network(net)
    return table
