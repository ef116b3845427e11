"""Tests for configuration loading and run manifests."""

import json
from pathlib import Path

import pytest

from cgforge import __version__
from cgforge.config import (
    MANIFEST_FILE,
    Config,
    PipelineConfig,
    RunManifest,
    config_hash,
    derive_seed,
    file_sha256,
)
from cgforge.errors import ConfigError
from cgforge.symbolizer import SymbolizationMode


class TestConfig:
    def test_defaults(self):
        c = Config()
        assert c.symbolize.mode is SymbolizationMode.LOOSE
        assert c.symbolize.modulus == 10
        assert c.embed.dim == 100
        assert c.arch.slice_len == 128
        assert c.train.rho == 0.99
        assert c.pipeline.split == (0.8, 0.1, 0.1)

    def test_from_empty_dict(self):
        assert Config.from_dict({}) == Config()

    def test_arch_inherits_embed_dim(self):
        c = Config.from_dict({"embed": {"dim": 16}})
        assert c.arch.embed_dim == 16

    def test_embed_dim_mismatch(self):
        with pytest.raises(ConfigError):
            Config.from_dict({"embed": {"dim": 16}, "arch": {"embed_dim": 32}})

    @pytest.mark.parametrize("section", ["embed", "train", "arch", "pipeline", "corpus", "symbolize"])
    def test_unknown_key(self, section):
        with pytest.raises(ConfigError, match="unknown"):
            Config.from_dict({section: {"bogus": 1}})

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            Config.from_dict({"pipeline": {"context": "nearby"}})
        with pytest.raises(ConfigError):
            Config.from_dict({"symbolize": {"policy": "medium"}})
        with pytest.raises(ConfigError):
            PipelineConfig(split=(0.5, 0.5))

    def test_dump_and_load(self, tmp_path):
        c = Config.from_dict({"seed": 9, "symbolize": {"policy": "strict"}, "pipeline": {"target_recall": 0.9}})
        path = tmp_path / "config.toml"
        c.dump(path)
        assert Config.load(path) == c

    def test_load_missing(self, tmp_path):
        with pytest.raises(ConfigError):
            Config.load(tmp_path / "nope.toml")

    def test_load_malformed(self, tmp_path):
        path = tmp_path / "config.toml"
        path.write_text("seed = = 1\n")
        with pytest.raises(ConfigError):
            Config.load(path)


class TestSeeds:
    def test_derive_seed_is_stable(self):
        assert derive_seed(7, "split") == derive_seed(7, "split")
        assert derive_seed(7, "split") != derive_seed(7, "matcher")
        assert derive_seed(7, "split") != derive_seed(8, "split")

    def test_derive_seed_is_non_negative(self):
        assert all(0 <= derive_seed(s, "x") < 2 ** 63 for s in range(20))

    def test_config_hash(self):
        assert config_hash(Config()) == config_hash(Config())
        assert config_hash(Config()) != config_hash(Config(seed=1))


class TestRunManifest:
    def test_create(self, tmp_path):
        data = tmp_path / "a.jsonl"
        data.write_text("x\n")
        m = RunManifest.create(Config(seed=4), {"a.jsonl": data})
        assert m.seed == 4
        assert m.inputs == {"a.jsonl": file_sha256(data)}
        assert m.version == __version__

    def test_digest_ignores_artifacts(self):
        a = RunManifest(config_hash="c", seed=1)
        b = RunManifest(config_hash="c", seed=1, artifacts=["embedder.cgm"])
        assert a.digest == b.digest
        assert a.digest != RunManifest(config_hash="c", seed=2).digest

    def test_digest_tracks_inputs(self, tmp_path):
        data = tmp_path / "a.jsonl"
        data.write_text("x\n")
        before = RunManifest.create(Config(), {"a": data}).digest
        data.write_text("y\n")
        assert RunManifest.create(Config(), {"a": data}).digest != before

    def test_write(self, tmp_path):
        m = RunManifest(config_hash="c", seed=1, artifacts=["matcher.cgm"])
        path = m.write(tmp_path / "out")
        assert path.name == MANIFEST_FILE
        written = json.loads(path.read_text())
        assert written["digest"] == m.digest
        assert written["artifacts"] == ["matcher.cgm"]


class TestBundledConfig:
    def test_loads(self):
        c = Config.load(Path(__file__).resolve().parent.parent / "config.toml")
        assert c.seed == 7
        assert c.arch == Config().arch
        assert c.pipeline.target_recall is None
