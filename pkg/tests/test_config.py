from pathlib import Path

import pytest

from app.core.config import Settings, load_experiment_config
from app.core.errors import ConfigError
from app.schemas.schemas import (
    DataConfig,
    ExperimentConfig,
    FusionMode,
    Selection,
    Task,
    Topology,
    fedavg_baseline,
)


class TestExperimentConfig:
    def test_defaults(self):
        config = ExperimentConfig()
        assert config.training.rounds == 15
        assert config.training.local_epochs == 5
        assert config.tree.tau0 == 0.85
        assert config.fusion.epsilon0 == 0.8
        assert config.fusion.omega == 0.5
        assert config.style.phi == 0.1
        assert config.style.activation_prob == 0.5
        assert config.inference.depth_coeff == 0.5
        assert [d.domain_id for d in config.data.domains] == ["A", "B", "C", "D"]
        assert all(d.image_size == 32 and d.n_samples == 40 for d in config.data.domains)

    def test_prostate_defaults(self):
        data = DataConfig(task=Task.PROSTATE)
        assert len(data.domains) == 6
        assert all(d.task == Task.PROSTATE for d in data.domains)

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate({"training": {"rounds": 0}})
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate({"fusion": {"omega": 1.0}})
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate({"style": {"phi": 0}})
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate({"data": {"domains": {"A": {"gamma": -1}}}})

    def test_duplicate_domains_rejected(self):
        with pytest.raises(ValueError):
            DataConfig.model_validate({"domains": [{"domain_id": "A"}, {"domain_id": "A"}]})

    def test_fedavg_baseline(self):
        baseline = fedavg_baseline(ExperimentConfig(seed=4))
        assert baseline.topology == Topology.STAR
        assert baseline.fusion.mode == FusionMode.DIRECT
        assert baseline.style.enabled is False
        assert baseline.inference.selection == Selection.ROOT
        assert baseline.seed == 4


class TestLoadExperimentConfig:
    def test_dotted_keys(self, config_file):
        config = load_experiment_config(config_file)
        assert config.name == "tiny"
        assert config.training.rounds == 1
        assert [d.domain_id for d in config.data.domains] == ["A", "B", "C"]
        assert config.data.domains[1].brightness_shift == 0.2
        assert config.data.domains[2].gamma == 1.5

    def test_demo_config(self):
        config = load_experiment_config(Path(__file__).parents[1] / "configs" / "demo.toml")
        assert [d.domain_id for d in config.data.domains] == ["A", "B", "C", "D"]
        assert config.fusion.fixed_layers == ["head"]
        assert config.inference.selection == Selection.ALL_WEIGHTED

    def test_seed_override(self, config_file):
        assert load_experiment_config(config_file, seed=7).seed == 7

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(tmp_path / "nope.toml")

    def test_unparseable(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("fusion.epsilon0 = = 0.8\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_invalid_value(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("fusion.omega = 1.5\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)


class TestSettings:
    def test_env_prefix(self, monkeypatch):
        monkeypatch.setenv("TREEFED_LOG", "DEBUG")
        monkeypatch.setenv("TREEFED_PORT", "9001")
        settings = Settings()
        assert settings.log == "DEBUG"
        assert settings.port == 9001
