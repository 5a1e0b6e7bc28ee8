import json

import numpy as np
import pytest

from apex_ood.config import RunConfig
from apex_ood.errors import ConfigError
from apex_ood.seeding import STAGE_GMM, STAGE_INIT, derive_rng


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.tau, cfg.tau_p, cfg.tau_q, cfg.alpha, cfg.beta_p) == (0.1, 0.1, 1.0, 0.5, 0.01)
        assert cfg.k_candidates == tuple(range(1, 11))
        assert cfg.quality_momentum == cfg.beta_p

    @pytest.mark.parametrize("field,value", [
        ("tau", 0.0), ("tau", -1.0), ("tau_p", 0.0), ("epsilon_ot", 0.0), ("beta_p", 1.5),
        ("cov_kind", "banded"), ("batch_size", 0), ("k_candidates", ()), ("conf_source", "x"),
    ])
    def test_validation(self, field, value):
        with pytest.raises(ConfigError):
            RunConfig(**{field: value})

    def test_dict_round_trip(self, tmp_path):
        cfg = RunConfig(seed=7, beta_q=0.2, k_candidates=(1, 2))
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert RunConfig.from_json(tmp_path / "c.json") == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig.from_dict({"temperature": 1.0})


class TestSeeding:
    def test_reproducible(self):
        a = derive_rng(42, STAGE_GMM, 3).random(4)
        b = derive_rng(42, STAGE_GMM, 3).random(4)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        draws = {
            tuple(derive_rng(42, stage, c).random(2))
            for stage in (STAGE_GMM, STAGE_INIT)
            for c in range(4)
        }
        assert len(draws) == 8

    def test_large_seed(self):
        assert derive_rng(2**64 - 1, STAGE_GMM).random() >= 0.0
