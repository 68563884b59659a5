import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import synth  # noqa: E402

DESK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def desk_runs():
    """Three desk-scale synthetic pretraining runs (200 + 200 lesions, side 32), shared by the slow tests."""
    runs = []
    for seed in DESK_SEEDS:
        t0 = time.perf_counter()
        store, lesions = synth.build_store(200, side=32, seed=seed)
        state, log = synth.pretrain_desk(store, seed, epochs=30)
        train, test = synth.split(lesions, seed)
        runs.append({"seed": seed, "store": store, "lesions": lesions, "train": train, "test": test,
                     "state": state, "log": log, "seconds": time.perf_counter() - t0})
    return runs


ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, name, passed, detail)``; ``passed=None`` means skipped."""
    def record(number, name, passed, detail=""):
        ACCEPTANCE.append((number, name, None if passed is None else bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {name}: {detail}")
