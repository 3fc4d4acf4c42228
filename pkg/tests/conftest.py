import numpy as np
import pytest

from ppfl.data import SplitSpec, prepare_client, synth_generate
from ppfl.model import BLOCKS, DarnnConfig, ParamLayout


def tiny_layout(n=2, T=3, hidden=3, n_layers=2, shared=("input_attn", "encoder")):
    return ParamLayout(DarnnConfig(n_features=n, window=T, hidden=hidden, n_layers=n_layers), shared)


def random_batch(rng, B, T, n):
    return rng.normal(size=(B, T, n)), rng.normal(size=(B, T)), rng.normal(size=B)


@pytest.fixture(scope="session")
def small_clients():
    """Four heterogeneous synthetic clients, 8 days each (fast)."""
    series = synth_generate(4, 8, seed=3, rows=[1, 2, 6, 8])
    return [prepare_client(s, 12, 4, SplitSpec()) for s in series]


@pytest.fixture(scope="session")
def all_shared_layout():
    return ParamLayout(DarnnConfig(2, 3, 3, 2), BLOCKS)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the one-line verdict of an acceptance criterion for the summary."""

    def record(number: int, name: str, ok: bool, detail: str):
        line = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'} {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
