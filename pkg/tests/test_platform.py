import numpy as np
import pytest

import TrepPlatform
from TrepPlatform import ConfigError, ContractError, DataError, NumericalError, TrepConfig


def test_defaults_are_the_baseline_settings():
    config = TrepConfig()
    assert (config.alpha, config.repr_dim, config.delta) == (3.0, 64, 3)
    assert config.gamma_phi == config.gamma_theta == 0.001
    assert config.decoder_hidden == 64


def test_json_config_with_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text('{"repr_dim": 32, "delta": 0, "seed": 4}')
    config = TrepPlatform.load_config(str(path), seed=9)
    assert (config.repr_dim, config.delta, config.seed) == (32, 0, 9)


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("repr_dim: 32\nlearning_rate: 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        TrepPlatform.load_config(str(path))


@pytest.mark.parametrize("values", [{"repr_dim": 7}, {"epsilon": 1.5}, {"gamma_phi": 0.0}, {"omega": 0},
                                    {"walk_min": 50, "walk_max": 40}, {"mll_mode": "beam"}, {"delta": -1},
                                    {"walks_per_cell": 0}, {"walk_length": 0}, {"window": 0}, {"negatives": 0},
                                    {"embed_epochs": 0}, {"pretrain_critic_iters": -1}, {"clip_norm": 0.0},
                                    {"resample_interval": 0.0}, {"convergence_window": 0}])
def test_invalid_values_rejected(values):
    with pytest.raises(ConfigError):
        TrepConfig(**values)


def test_zero_critic_pretraining_iterations_allowed():
    assert TrepConfig(pretrain_critic_iters=0).pretrain_critic_iters == 0


def test_missing_config_file():
    with pytest.raises(ConfigError):
        TrepPlatform.load_config("/nonexistent/config.json")


def test_component_seeds_are_independent_and_stable():
    seeds = [TrepPlatform.component_int_seed(3, name) for name in TrepPlatform.SEED_COMPONENTS]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [TrepPlatform.component_int_seed(3, name) for name in TrepPlatform.SEED_COMPONENTS]
    assert TrepPlatform.component_int_seed(4, "train") != TrepPlatform.component_int_seed(3, "train")
    with pytest.raises(ContractError):
        TrepPlatform.component_seed(0, "dashboard")


def test_error_categories_and_exit_codes():
    assert (ConfigError.category, ConfigError.exit_code) == ("config", 2)
    assert (DataError.category, DataError.exit_code) == ("data", 3)
    assert (NumericalError.category, NumericalError.exit_code) == ("numerical", 4)
    assert issubclass(TrepPlatform.RangeError, DataError)
    assert issubclass(TrepPlatform.DivergenceError, NumericalError)
    assert issubclass(ContractError, ValueError)


def test_disk_cache_memoizes(tmp_path):
    calls = []

    @TrepPlatform.disk_cache()
    def square(x):
        calls.append(x)
        return x * x

    assert square(3, cache_dir=str(tmp_path), cache_key="three") == 9
    assert square(3, cache_dir=str(tmp_path), cache_key="three") == 9
    assert square(3) == 9
    assert calls == [3, 3]


def test_check_finite():
    TrepPlatform.check_finite(np.ones(2), "ones")
    with pytest.raises(NumericalError):
        TrepPlatform.check_finite(np.array([np.inf]), "inf")
