import time

import numpy as np
import pytest

from wsss.data import SyntheticConfig, generate
from wsss.model import BackboneConfig, Model, TrainConfig, train

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus():
    return generate(SyntheticConfig(), seed=42)


@pytest.fixture(scope="session")
def trained(corpus):
    """Default-config base and PCM models trained on the default corpus."""
    out = {}
    for key in ("base", "pcm"):
        model = Model(BackboneConfig(pcm=key == "pcm"), seed=42)
        t0 = time.perf_counter()
        res = train(model, corpus["train"], corpus["val"], TrainConfig(seed=42))
        out[key] = model
        out[f"{key}_result"] = res
        out[f"{key}_seconds"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def small_corpus():
    return generate(SyntheticConfig(n_total=40), seed=3)
