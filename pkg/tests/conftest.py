import sys

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    """Print one ``PASS``/``FAIL`` line for an acceptance criterion and assert it."""

    def emit(name: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _LINES.append(line)
        with capsys.disabled():
            sys.stdout.write("\n" + line + "\n")
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
