import numpy as np
import pytest

from landseg.data import write_dataset
from landseg.train import TrainConfig, train


def small_config(root, out, **overrides) -> TrainConfig:
    values = dict(dataset_root=str(root), checkpoint_out=str(out), depth=2, base_filters=4,
                  batch_size=4, epochs=2, seed=3)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 tiles of 16x16: 10 train, 2 val."""
    root = tmp_path_factory.mktemp("data")
    write_dataset(12, 100, 16, 0.8, root)
    return root


@pytest.fixture(scope="session")
def small_run(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(small_config(small_dataset, out))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[name] = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES.values():
        terminalreporter.write_line(line)
