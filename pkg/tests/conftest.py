import numpy as np
import pytest

from densal.bench import CorpusConfig, generate_corpus, training_set
from densal.model import ModelSpec, TrainConfig, train

CRITERIA: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(CRITERIA, key=lambda k: int(k.split(".")[0])):
        ok, detail = CRITERIA[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def record():
    """Record an acceptance criterion outcome for the terminal summary."""

    def _record(name: str, ok: bool, detail: str = ""):
        CRITERIA[name] = (bool(ok), detail)
        return ok

    return _record


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusConfig(seed=3, n_blocks=16, cloud_fraction=0.0))


@pytest.fixture(scope="session")
def small_model(small_corpus):
    data = training_set(small_corpus[:8], 16)
    spec = ModelSpec(hidden=(16, 16), dropout_rate=0.1)
    return train(data, spec, TrainConfig(learning_rate=3e-3, batch_size=16, epochs=10, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
