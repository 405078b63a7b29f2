import os
from pathlib import Path

import numpy as np
import pytest

from hjshield.reachability import GameParams, Grid3D, load_value_function, save_value_function, solve_brs

CACHE = Path(os.environ.get("HJSHIELD_TEST_CACHE", Path(__file__).resolve().parent / ".cache"))


def _cached_solve(grid: Grid3D, name: str):
    """Solve once and reuse across sessions; the file name carries the params hash."""
    vf = None
    CACHE.mkdir(exist_ok=True)
    from hjshield.reachability import params_hash

    path = CACHE / f"{name}-{params_hash(grid, GameParams(), 1e-4, 2000)[:12]}.hjvf"
    if path.exists():
        vf = load_value_function(path, mmap=False)
    if vf is None or not vf.converged:
        vf = solve_brs(grid, GameParams())
        save_value_function(vf, path)
    return vf, path


@pytest.fixture(scope="session")
def coarse_vf():
    return _cached_solve(Grid3D.coarse(), "coarse")[0]


@pytest.fixture(scope="session")
def coarse_vf_path(coarse_vf):
    return _cached_solve(Grid3D.coarse(), "coarse")[1]


@pytest.fixture(scope="session")
def default_vf_path():
    return _cached_solve(Grid3D(), "default")[1]


@pytest.fixture(scope="session")
def default_vf(default_vf_path):
    return load_value_function(default_vf_path, mmap=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def _report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
