from __future__ import annotations

import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from meshlets.datasets import synthetic_corpus  # noqa: E402
from meshlets.vae import TrainConfig, train  # noqa: E402

# desk-scale prior shared by the fitting, pipeline and acceptance tests
DESK_CORPUS = 10_000
DESK_TRAIN = TrainConfig(epochs=50, batch_size=64, lr=1e-4, beta=1e-3, seed=0)


class Trained:
    def __init__(self, model, grids, valid, seconds, path):
        self.model, self.grids, self.valid, self.seconds = model, grids, valid, seconds
        self.path = path


@pytest.fixture(scope="session")
def desk_corpus():
    return synthetic_corpus(DESK_CORPUS, seed=0)


@pytest.fixture(scope="session")
def desk_prior(desk_corpus, tmp_path_factory):
    grids, valid = desk_corpus
    path = tmp_path_factory.mktemp("prior") / "desk.vae"
    t0 = time.perf_counter()
    model = train((grids, valid), DESK_TRAIN, checkpoint=path)
    return Trained(model, grids, valid, time.perf_counter() - t0, path)


# acceptance verdicts, repeated after the run so they survive output capture
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
