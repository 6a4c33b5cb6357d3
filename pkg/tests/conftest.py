import numpy as np
import pytest

from feddtg.config import RunConfig
from feddtg.experiments import load_datasets, make_partition, triplet_spec
from feddtg.protocol import CommLedger, init_federation

from oracles import toy_overrides

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_config(**over) -> RunConfig:
    base = toy_overrides(
        rounds=3,
        mixture_samples_per_class=40,
        mixture_test_per_class=20,
        generator_hidden=[8],
        discriminator_hidden=[8],
        classifier_hidden=[8],
        z_dim=2,
        distill_sample_count=24,
        distill_batch_size=8,
        batch_size=16,
        eval_every=1,
    )
    base.update(over)
    return RunConfig(**base).validate()


class Federation:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.train, self.test = load_datasets(cfg)
        self.shards = make_partition(cfg, self.train)
        self.spec = triplet_spec(cfg, self.train.sample_dim, self.train.n_classes)
        self.server, self.clients = init_federation(self.spec, cfg)
        self.ledger = CommLedger()


@pytest.fixture
def federation():
    def make(**over):
        return Federation(small_config(**over))

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
