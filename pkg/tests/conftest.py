import numpy as np
import pytest

from subpopdro.dataset import SyntheticSpec, synthesize

ACCEPTANCE_LINES = []


def small_spec(n=2000, seed=0, proportions=(0.7, 0.3), m=3):
    k = len(proportions)
    rng = np.random.default_rng(1000 + seed)
    return SyntheticSpec(
        group_proportions=list(proportions),
        means=rng.normal(0, 0.5, (k, m)).tolist(),
        coefs=rng.normal(0, 1.0, (k, m)).tolist(),
        intercepts=rng.normal(0, 0.3, k).tolist(),
        n=n,
        seed=seed,
    )


@pytest.fixture
def small_ds():
    return synthesize(small_spec())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
