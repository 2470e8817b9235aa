import numpy as np
import pytest

from phonotok.diffkm import DiffKmConfig
from phonotok.model import ModelConfig
from phonotok.synthgen import GenConfig, gen_dataset
from phonotok.trainer import TrainConfig


@pytest.fixture(scope="session")
def gen_cfg():
    return GenConfig()


@pytest.fixture(scope="session")
def small_dataset(gen_cfg):
    return gen_dataset(gen_cfg, 200)


@pytest.fixture(scope="session")
def model_cfg(gen_cfg):
    return ModelConfig(d=gen_cfg.d, v_c=gen_cfg.v_c, d_s=gen_cfg.d_s)


@pytest.fixture
def short_train_cfg():
    return TrainConfig(stage1_epochs=2, stage2_epochs=2)


@pytest.fixture
def km_cfg():
    return DiffKmConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record an acceptance sub-check; the terminal summary prints one line per criterion."""
    store = request.config.stash.setdefault(CRITERIA, {})

    def record(number, ok, detail):
        store.setdefault(number, []).append((bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(CRITERIA, None)
    if not store:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(store):
        checks = store[number]
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  " + "; ".join(d for _, d in checks))
