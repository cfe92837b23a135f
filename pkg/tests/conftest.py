import numpy as np
import pytest

from drolt import epsilon, losses


def random_problem(rng, n=None, dim=None, n_classes=None, mode="inverse_count"):
    """Random batch over at least two classes, plus centroids and dataset counts."""
    n_classes = n_classes or int(rng.integers(2, 5))
    n = n or int(rng.integers(n_classes, 13))
    dim = dim or int(rng.integers(1, 9))
    labels = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, size=n - n_classes)])
    rng.shuffle(labels)
    z = rng.normal(size=(n, dim))
    mu = rng.normal(size=(n_classes, dim))
    counts = np.bincount(labels, minlength=n_classes) + rng.integers(0, 20, size=n_classes)
    return losses.make_batch(z, labels, counts, mode), mu, counts


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def problem(rng):
    return random_problem(rng)


def learned_policy(rng, counts):
    return epsilon.EpsilonPolicy("learned", counts, per_class_param=rng.normal(size=len(counts)))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
