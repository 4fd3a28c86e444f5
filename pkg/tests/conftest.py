import numpy as np
import pytest

from biasreversal.population import pop_a, random_population


def positivity_c(pop) -> float:
    """Largest c keeping every (x, r) stratum searched at tau=0."""
    return min(float(pop.mu[pop.stratum_mask(x, r)].max()) for x, r in pop.strata())


def population_suite(n: int = 50):
    """POP-A plus ``n`` seeded random populations, each with a positivity-safe c."""
    suite = [("pop_a", pop_a(), 0.45)]
    for s in range(n):
        n_x = 1 + s % 4
        n_u = 2 + (3 * s) % 7
        p = random_population(1000 + s, n_x, n_u)
        suite.append((f"random{s}", p, positivity_c(p)))
    return suite


@pytest.fixture(scope="session")
def popa():
    return pop_a()


@pytest.fixture(scope="session")
def suite():
    return population_suite()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance log (one PASS/FAIL line per criterion) after the run."""
    import sys
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
