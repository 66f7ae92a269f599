import time

import numpy as np
import pytest
from hypothesis import settings

from trigmark.classifier import MLP, TrainConfig, train
from trigmark.synthetic import generate_synthetic

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_data():
    return generate_synthetic(seed=7)


@pytest.fixture(scope="session")
def clean_model(desk_data):
    train_set, _ = desk_data
    start = time.perf_counter()
    model = MLP(train_set.image_shape, [128, 128], train_set.num_classes, seed=1)
    train(model, train_set, TrainConfig(epochs=40, rng_seed=2))
    model.train_seconds = time.perf_counter() - start
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
