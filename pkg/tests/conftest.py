import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from eapstab.cli import shipped_checkpoint  # noqa: E402
from eapstab.model import ModelConfig, init_model, load_model  # noqa: E402
from eapstab.tasks import TaskGenerator, generate_dataset, vocab_size  # noqa: E402


def small_config(task="toy-ioi", **kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=2, d_model=12, d_head=4, d_mlp=16, d_vocab=vocab_size(task), n_ctx=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_model():
    return init_model(small_config(), seed=3)


@pytest.fixture(scope="session")
def ioi_data():
    return generate_dataset(TaskGenerator("toy-ioi"), 8, seed=1)


@pytest.fixture(scope="session")
def shipped():
    cache = {}

    def get(task):
        if task not in cache:
            cache[task] = load_model(shipped_checkpoint(task))
        return cache[task]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---- acceptance-criterion lines, echoed at the end of the run

CRITERIA: dict[str, str] = {}


def record_criterion(key: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}"
    CRITERIA[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
            terminalreporter.write_line(CRITERIA[key])
