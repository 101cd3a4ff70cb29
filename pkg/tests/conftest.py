import numpy as np
import pytest

from ambirir.ism_sim import scene_from_relative
from ambirir.sh_ambi import Direction

FS = 16000.0

_CRITERIA: list[str] = []


def record_criterion(line: str) -> None:
    _CRITERIA.append(line)
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


def random_direction(rng) -> Direction:
    return Direction.from_cartesian(rng.standard_normal(3))


def random_scene(rng, order=3, n_reflections=5, gain=(0.3, 0.8), delay_ms=(1.0, 40.0),
                 min_sep_ms=2.0, direct_toa=0.01):
    """Sample-aligned ISM scene with well separated reflections."""
    while True:
        d = np.sort(rng.uniform(*delay_ms, n_reflections))
        if n_reflections < 2 or np.all(np.diff(d) >= min_sep_ms):
            break
    delays = np.round(d * 1e-3 * FS) / FS
    g = rng.uniform(*gain, n_reflections)
    dirs = [random_direction(rng) for _ in range(n_reflections + 1)]
    refl = [(delays[i], g[i], dirs[i + 1]) for i in range(n_reflections)]
    return scene_from_relative(order, dirs[0], refl, FS, direct_toa=direct_toa)
