import numpy as np
import pytest
import torch

from ppt.attention import AttentionConfig
from ppt.datagen import Dataset, SubjectSystem, builtin_system, generate_elevator_dataset
from ppt.twin import ModelConfig

torch.set_num_threads(1)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(n_features=3, bins=4, proj_dim=5, batch_size=4, window=4, max_epochs=3)
    base.update(overrides)
    return ModelConfig(AttentionConfig(d_model=4, n_heads=2, dim_feedforward=6, n_layers=1), **base)


def make_dataset(tte, features=None, name="Toy", seed=None) -> Dataset:
    tte = np.asarray(tte, dtype=float)
    if features is None:
        features = np.zeros((tte.size, 3))
    return Dataset(SubjectSystem(name, {}, {}), np.arange(tte.size), features, tte, seed=seed)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def up_best():
    return generate_elevator_dataset(builtin_system("UpBest")[1], 120, 3, n_features=3)


@pytest.fixture(scope="session")
def lunch_best():
    return generate_elevator_dataset(builtin_system("LunchBest")[1], 80, 4, n_features=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
