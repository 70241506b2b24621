import numpy as np
import pytest

from vlpretrain.model import ModelConfig
from vlpretrain.synth import WorldSpec, generate
from vlpretrain.tokenizer import Vocab


@pytest.fixture(scope="session")
def vocab():
    return Vocab.default()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    return WorldSpec(num_images=60)


@pytest.fixture(scope="session")
def small_corpus(small_world):
    return generate(small_world, 3, "small")


@pytest.fixture(scope="session")
def small_cfg():
    # matches the synthetic world: 32-d features, 12 classes, bundled vocab
    return ModelConfig(layers=1, hidden=16, intermediate=32, heads=2, dropout=0.0, num_visual_tokens=4)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
