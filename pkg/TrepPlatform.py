import hashlib
import json
import logging
import pprint
from dataclasses import dataclass, field, fields, asdict
from typing import Dict, List, Optional

import diskcache
import numpy as np
import yaml
from yaml.loader import SafeLoader

TOOL_VERSION = "1.0.0"

logger = logging.getLogger("trep")


class TrepError(Exception):
    """Base class for every failure the CLI reports with a category and an exit code."""
    category = "error"
    exit_code = 1


class ContractError(TrepError, ValueError):
    category = "contract"
    exit_code = 1


class ConfigError(TrepError):
    category = "config"
    exit_code = 2


class DataError(TrepError):
    category = "data"
    exit_code = 3


class RangeError(DataError):
    category = "range"


class ScenarioError(DataError):
    category = "scenario"


class NumericalError(TrepError):
    category = "numerical"
    exit_code = 4


class DivergenceError(NumericalError):
    category = "divergence"


def log(message):
    formatted_str = message if isinstance(message, str) else pprint.pformat(message, depth=None, width=120)
    logger.info(formatted_str)


def configure_logging(level: str = "INFO"):
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@dataclass(frozen=True)
class TrepConfig:
    # Grid and representation
    alpha: float = 3.0
    origin: List[float] = field(default_factory=lambda: [0.0, 0.0])
    repr_dim: int = 64
    decoder_size: Optional[int] = None

    # Reward and actor-critic training
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
    seed: int = 0

    # Pretraining
    pretrain_epochs: int = 50
    pretrain_critic_iters: int = 200
    mll_mode: str = "teacher_forcing"

    # Critic
    critic_hidden: int = 512
    critic_rnn: int = 64

    # Cell embeddings
    embed_dim: int = 32
    walks_per_cell: int = 10
    walk_length: int = 40
    window: int = 5
    negatives: int = 5
    embed_epochs: int = 5
    freeze_embeddings: bool = True

    # Evaluation
    kmeans_restarts: int = 1

    # ATC ingestion
    atc_columns: List[int] = field(default_factory=lambda: [0, 1, 2, 3])
    atc_unit_scale: float = 0.001
    atc_min_length: int = 2
    atc_bounds: Optional[List[float]] = None
    resample_interval: float = 2.0

    cache_dir: Optional[str] = None

    def __post_init__(self):
        problems = []
        if self.alpha <= 0:
            problems.append("alpha must be positive")
        if len(self.origin) != 2:
            problems.append("origin is [x, y] in meters")
        if self.repr_dim < 2 or self.repr_dim % 2:
            problems.append("repr_dim must be an even integer >= 2")
        if self.decoder_size is not None and self.decoder_size < 1:
            problems.append("decoder_size must be positive")
        if self.delta < 0 or int(self.delta) != self.delta:
            problems.append("delta must be a non-negative integer")
        if not 0 <= self.epsilon <= 1:
            problems.append("epsilon must lie in [0, 1]")
        if self.epsilon_final is not None and not 0 <= self.epsilon_final <= 1:
            problems.append("epsilon_final must lie in [0, 1]")
        if self.omega < 1:
            problems.append("omega must be >= 1")
        for name in ("gamma_phi", "gamma_theta"):
            if not 0 < getattr(self, name) <= 1:
                problems.append(f"{name} must lie in (0, 1]")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            problems.append("learning rates must be positive")
        if not 1 <= self.walk_min <= self.walk_max:
            problems.append("walk lengths must satisfy 1 <= walk_min <= walk_max")
        if self.replay_capacity < self.omega:
            problems.append("replay_capacity must be at least omega")
        if self.mll_mode not in ("teacher_forcing", "free_running"):
            problems.append("mll_mode must be teacher_forcing or free_running")
        if min(self.critic_hidden, self.critic_rnn, self.embed_dim) < 1:
            problems.append("network sizes must be positive")
        for name in ("walks_per_cell", "walk_length", "window", "negatives", "embed_epochs",
                     "convergence_window", "convergence_windows", "divergence_windows", "atc_min_length"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("clip_norm", "convergence_tolerance", "resample_interval", "atc_unit_scale"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if len(self.atc_columns) != 4:
            problems.append("atc_columns needs four indices: timestamp, person_id, x, y")
        if self.atc_bounds is not None and len(self.atc_bounds) != 4:
            problems.append("atc_bounds is [xmin, ymin, xmax, ymax]")
        if min(self.max_iters, self.pretrain_epochs, self.pretrain_critic_iters) < 0 or self.kmeans_restarts < 1:
            problems.append("iteration counts must be non-negative and kmeans_restarts >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def decoder_hidden(self) -> int:
        return self.decoder_size or self.repr_dim

    def to_dict(self) -> Dict:
        return asdict(self)


def load_config(path: Optional[str] = None, **overrides) -> TrepConfig:
    """
    Read a JSON or YAML config file and apply overrides (e.g. --seed).
    Keys not known to TrepConfig are rejected.
    """
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as file:
                values = yaml.load(file, Loader=SafeLoader) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} does not parse: {e}")
        if not isinstance(values, dict):
            raise ConfigError(f"config file {path} must hold a mapping")

    known = {f.name for f in fields(TrepConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrepConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e))


# Components that draw random numbers; the order fixes which child seed each one gets.
SEED_COMPONENTS = ("embedding", "actor_init", "critic_init", "pretrain_actor",
                   "pretrain_critic", "train", "synthetic", "cluster", "perturb", "baseline")


def component_seed(root_seed: int, component: str) -> np.random.SeedSequence:
    if component not in SEED_COMPONENTS:
        raise ContractError(f"unknown seed component: {component}")
    children = np.random.SeedSequence(root_seed).spawn(len(SEED_COMPONENTS))
    return children[SEED_COMPONENTS.index(component)]


def component_rng(root_seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(component_seed(root_seed, component))


def component_int_seed(root_seed: int, component: str) -> int:
    return int(component_seed(root_seed, component).generate_state(1)[0] & 0x7FFFFFFF)


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sha256_text(*parts: str) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def stable_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


_caches: Dict[str, diskcache.Cache] = {}


def get_cache(directory: str) -> diskcache.Cache:
    if directory not in _caches:
        _caches[directory] = diskcache.Cache(directory)
    return _caches[directory]


def disk_cache(directory_arg: str = "cache_dir"):
    """
    Memoize a function in a diskcache.Cache. The decorated function takes a keyword
    argument naming the cache directory (None disables caching) and a `cache_key`
    keyword that identifies the result; both are consumed by the wrapper.
    """
    def decorator(func):
        def wrapper(*args, **kwargs):
            directory = kwargs.pop(directory_arg, None)
            key = kwargs.pop("cache_key", None)
            if directory is None or key is None:
                return func(*args, **kwargs)
            cache = get_cache(directory)
            cache_key = f"{func.__name__}_{key}"
            if cache_key in cache:
                try:
                    return cache[cache_key]
                except KeyError:
                    pass
            result = func(*args, **kwargs)
            cache.set(cache_key, result)
            return result
        return wrapper
    return decorator


def check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values produced by {what}")
