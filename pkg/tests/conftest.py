import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def samples():
    """Clean 5000-point samples shared across modules (seed 7)."""
    from splatgeom.surfaces import parse_surface, sample_surface

    cache = {}

    def get(spec, n=5000, sigma=0.0, seed=7):
        key = (spec, n, sigma, seed)
        if key not in cache:
            cache[key] = sample_surface(parse_surface(spec), n, seed=seed, noise_sigma=sigma)
        return cache[key]

    return get
