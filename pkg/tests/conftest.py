import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from zoneliq.model import CostSpec, FunctionSpec, GridSpec, ModelSpec, validate  # noqa: E402

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def bench():
    """Driftless unit ABM at the barrier, p=2, phi=0, rho=1, T=1, x0=1."""
    return validate(ModelSpec(), CostSpec())


@pytest.fixture(scope="session")
def bench_value(bench):
    from zoneliq.value import solve
    return solve(bench, GridSpec(nt=400, nz=81))


@pytest.fixture(scope="session")
def configs_dir():
    return CONFIGS


def problem(kind="ABM", sigma=1.0, drift=0.0, barrier=0.0, side="lower", z0=None, p=2.0,
            phi=0.0, rho=1.0, T=1.0, x0=1.0):
    z0 = barrier if z0 is None else z0
    phi = phi if isinstance(phi, FunctionSpec) else FunctionSpec.constant(phi)
    rho = rho if isinstance(rho, FunctionSpec) else FunctionSpec.constant(rho)
    return validate(ModelSpec(kind, sigma, drift, barrier, side, z0),
                    CostSpec(p, phi, rho, T, x0))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
