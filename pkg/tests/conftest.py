import pytest

from app.schemas.schemas import (
    DataConfig,
    ExperimentConfig,
    ModelConfig,
    Task,
    TrainingConfig,
    default_domains,
)
from app.services.synthetic import generate_all


def tiny_config(n_domains: int = 3, rounds: int = 2, **update) -> ExperimentConfig:
    domains = default_domains(Task.FUNDUS, n_samples=6, image_size=12)[:n_domains]
    config = ExperimentConfig(
        data=DataConfig(domains=domains),
        training=TrainingConfig(rounds=rounds, local_epochs=1, lr=0.2, batch_size=4),
        model=ModelConfig(conv_filters=2, hidden_units=4),
        seed=3,
    )
    return config.model_copy(update=update)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def data(config):
    return generate_all(config.data.domains)


TINY_CONFIG_TEXT = """
name = "tiny"
seed = 1
training.rounds = 1
training.local_epochs = 1
training.batch_size = 4
model.conv_filters = 2
model.hidden_units = 4
data.domains.A.n_samples = 4
data.domains.A.image_size = 12
data.domains.A.seed = 11
data.domains.B.n_samples = 4
data.domains.B.image_size = 12
data.domains.B.brightness_shift = 0.2
data.domains.B.seed = 12
data.domains.C.n_samples = 4
data.domains.C.image_size = 12
data.domains.C.gamma = 1.5
data.domains.C.seed = 13
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG_TEXT)
    return path
