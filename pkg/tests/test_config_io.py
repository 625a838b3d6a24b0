import json

import numpy as np
import pytest

from charfire.config import CONFIG_ENV, ConfigError, RunConfig, load_config
from charfire.io import (read_dicts, read_matrix, read_metadata, sidecar_path, write_dicts, write_matrix,
                         write_metadata)


class TestConfig:
    def test_defaults(self):
        c = load_config()
        assert c == RunConfig()
        assert (c.iterations, c.burn_in, c.thin, c.chains) == (30_000, 10_000, 10, 4)
        assert c.xi is None

    def test_toml_file_and_overrides(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text('seed = 7\nthreshold = "0.9"\nxi_grid = [0.5, 0.9]\niterations = 100\nburn_in = 10\n')
        c = load_config(f, seed=9)
        assert c.seed == 9 and c.xi == 0.9 and c.xi_grid == (0.5, 0.9) and c.iterations == 100

    def test_environment_variable(self, tmp_path, monkeypatch):
        f = tmp_path / "c.toml"
        f.write_text("seed = 11\n")
        monkeypatch.setenv(CONFIG_ENV, str(f))
        assert load_config().seed == 11

    def test_unknown_keys(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("sead = 1\n")
        with pytest.raises(ConfigError, match="unknown config keys: sead"):
            load_config(f)

    def test_tables_rejected(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("[mcmc]\niterations = 5\n")
        with pytest.raises(ConfigError, match="flat"):
            load_config(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "nope.toml")

    @pytest.mark.parametrize("kw", [{"model": "tri"}, {"sigma_b_sq": 5.0, "sigma_f_sq": 1.0},
                                    {"iterations": 10, "burn_in": 10}, {"threshold": "1.5"},
                                    {"seed": 1.5}, {"allow_gaps": 1}, {"phi_min": 4.0}])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw)

    def test_hash_ignores_out_and_workers(self):
        a = RunConfig()
        assert a.config_hash() == a.replace(out="elsewhere", workers=8).config_hash()
        assert a.config_hash() != a.replace(seed=1).config_hash()
        assert len(a.config_hash()) == 64

    def test_to_dict_round_trip(self):
        c = RunConfig(seed=3, xi_grid=(0.6, 0.7))
        assert RunConfig(**json.loads(json.dumps(c.to_dict()))) == c


class TestIO:
    def test_matrix_round_trip_exact(self, tmp_path):
        M = np.random.default_rng(0).normal(size=(20, 4)) * 1e-7
        M[0, 0] = np.nan
        p = write_matrix(tmp_path / "m.csv", ["a", "b", "c", "d"], M)
        header, back = read_matrix(p)
        assert header == ["a", "b", "c", "d"]
        assert np.array_equal(back, M, equal_nan=True)

    def test_dicts(self, tmp_path):
        p = write_dicts(tmp_path / "d.csv", [{"x": 1, "y": True, "z": 0.1}])
        assert read_dicts(p) == [{"x": "1", "y": "true", "z": "0.1"}]
        with pytest.raises(ValueError):
            write_dicts(tmp_path / "e.csv", [])

    def test_sidecar(self, tmp_path):
        c = RunConfig(seed=5)
        p = write_dicts(tmp_path / "d.csv", [{"x": 1}])
        write_metadata(p, c, stage="test", rates=np.array([0.25, np.inf]))
        assert sidecar_path(p).name == "d.csv.meta.json"
        meta = read_metadata(p)
        assert meta["config_hash"] == c.config_hash() and meta["seed"] == 5
        assert meta["rates"] == [0.25, "inf"] and meta["config"]["seed"] == 5

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_matrix(tmp_path / "x.csv")
        with pytest.raises(FileNotFoundError):
            read_metadata(tmp_path / "x.csv")
