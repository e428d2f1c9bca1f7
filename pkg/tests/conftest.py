import numpy as np
import pytest

from structaug.gradsource import train_tiny
from structaug.tensor_core import Image
from structaug.testkit import synthetic_bars

# classifier settings shared by the end-to-end tests (see tests/test_acceptance.py)
TRAIN_COUNT, TEST_COUNT = 600, 200
TRAIN_SEED, TEST_SEED = 1, 2


def random_image(rng, m, n, channels=3, lo=0.0, hi=1.0):
    return Image(rng.uniform(lo, hi, (channels, m, n)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def bars_train():
    return synthetic_bars(TRAIN_COUNT, 8, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def bars_test():
    return synthetic_bars(TEST_COUNT, 8, seed=TEST_SEED)


@pytest.fixture(scope="session")
def trained_mlp(bars_train):
    X, y = bars_train
    return train_tiny(X.reshape(len(y), -1), y, epochs=200, lr=0.1, hidden=16, seed=0, input_shape=X.shape[1:])


@pytest.fixture(scope="session")
def trained_linear(bars_train):
    X, y = bars_train
    return train_tiny(X.reshape(len(y), -1), y, epochs=200, lr=0.3, seed=0, input_shape=X.shape[1:])


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion_" not in getattr(rep, "nodeid", "") or rep.when != "call" and outcome != "error":
                continue
            name = rep.nodeid.split("::")[-1][len("test_criterion_"):]
            detail = "; ".join(f"{k}={v}" for k, v in getattr(rep, "user_properties", []))
            rows.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in sorted(rows):
        terminalreporter.write_line(f"criterion {name}: {verdict}" + (f"  [{detail}]" if detail else ""))
