import pytest
import torch

from featsketch.data import make_toy_pairs
from featsketch.fusion import build_generator
from featsketch.generator_tap import LatentCode, build_toy_generator, toy_schedule
from featsketch.trainer import Trainer, toy_model_config, toy_train_config

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def schedule():
    return toy_schedule()


@pytest.fixture(scope="session")
def handle(schedule):
    return build_toy_generator(schedule, seed=0)


@pytest.fixture(scope="session")
def sketch_net(schedule):
    m = toy_model_config()
    return build_generator(schedule, m.ablation, 0, m.reduced_cap, m.fused_max, m.fused_min).eval()


@pytest.fixture
def latent(handle):
    g = torch.Generator().manual_seed(7)
    return LatentCode(handle.sample_latents(1, g)[0])


@pytest.fixture(scope="session")
def toy_data(handle):
    return make_toy_pairs(handle, 4, seed=0)


def run_toy(handle, data, iterations=None, seed=0):
    """Train the desk-scale profile in memory; returns the trainer."""
    cfg = toy_train_config(seed=seed)
    trainer = Trainer(cfg, data, handle, model=toy_model_config())
    trainer.run(stop_at=iterations)
    return trainer


@pytest.fixture(scope="session")
def toy_run(handle, toy_data, tmp_path_factory):
    """One full 300-iteration toy run written to disk; shared by the trainer and acceptance tests."""
    from featsketch.trainer import train

    out = tmp_path_factory.mktemp("toy_run")
    return train(toy_train_config(), toy_data, handle, model=toy_model_config(), out_dir=out)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
