"""Shared fixtures: a small rendered dataset, a quickly trained model, and
the recorder that prints one verdict line per acceptance gate."""

import pytest

from faddefend.classifiers import train_desk_classifier
from faddefend.data import load_labeled_folder, make_desk_dataset

GATE_LINES: list[str] = []


@pytest.fixture(scope="session")
def gate():
    """Record a pass/fail line for an acceptance gate, then assert it."""

    def record(num: int, title: str, ok: bool, detail: str):
        line = f"[gate {num:02d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        GATE_LINES.append(line)
        print(line, flush=True)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gates")
        for line in GATE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_mini(tmp_path_factory):
    """300/100 image dataset, enough for fast training smoke tests."""
    root = tmp_path_factory.mktemp("desk_mini")
    make_desk_dataset(str(root), n_train=300, n_test=100, seed=0)
    return str(root)


@pytest.fixture(scope="session")
def desk_test_images(desk_mini):
    """The test split of the mini dataset, loaded once."""
    return load_labeled_folder(desk_mini + "/test").images


@pytest.fixture(scope="session")
def mini_model(desk_mini):
    handle, _ = train_desk_classifier(desk_mini, seed=0, epochs=4)
    return handle
