import numpy as np
import pytest

from stratarm.core import ExperimentData, Propensity
from stratarm.design import assign_matched_tuples, pair_groups


def random_experiment(rng, n_groups, k=2, a=1, d_h=1, d_z=0, d_psi=2):
    """Small matched-tuple experiment with generic (non-degenerate) numbers."""
    n = n_groups * k
    psi = rng.standard_normal((n, d_psi))
    h = rng.standard_normal((n, d_h)) + psi[:, :1]
    z = rng.standard_normal((n, d_z))
    design = assign_matched_tuples(psi, Propensity(a, k), rng_seed=int(rng.integers(1 << 30)))
    y = rng.standard_normal(n) + h.sum(axis=1) * 0.7 + design.treatment
    data = ExperimentData(y=y, d=design.treatment, psi=psi, h=h, z=z)
    return data, design


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def pairs_experiment(rng):
    data, design = random_experiment(rng, 12, k=2, a=1, d_h=2, d_z=1)
    return data, design, pair_groups(design, data.psi)


@pytest.fixture
def triples_experiment(rng):
    data, design = random_experiment(rng, 10, k=3, a=2, d_h=2, d_z=2)
    return data, design, pair_groups(design, data.psi)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
