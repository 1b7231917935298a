import warnings

import numpy as np
import pytest

from magmove.energy import MaterialParams
from magmove.grid import GridSpec
from magmove.stepper import DataProviders, SpaceTimeField, StepConfig, run_evolution

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    """Book one acceptance line; printed now and again in the terminal summary."""
    ok = _CRITERIA.get(number, (True, ""))[0] and passed
    prev = _CRITERIA.get(number, (True, ""))[1]
    _CRITERIA[number] = (ok, f"{prev}; {detail}" if prev else detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def relaxation_data(spec: GridSpec) -> DataProviders:
    X = spec.coords
    M0 = np.tile([0.0, 0.0, 1.0], (spec.num_nodes, 1)) + 0.1 * np.sin(2 * X)
    return DataProviders(X.copy(), M0)


def toy_params() -> MaterialParams:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return MaterialParams(a=0, q=2, beta=np.inf, A=0, K=0, stray=False, override=True)


def toy_eta0(spec: GridSpec) -> np.ndarray:
    X = spec.coords
    return X + 0.05 * np.sin(np.pi * X) * np.sin(2 * np.pi * X[:, [1, 2, 0]])


UNIFORM_H = SpaceTimeField(lambda t, x: np.array([0.1, 0.2, -0.3]) * np.ones_like(x),
                           lambda t, x: np.zeros(x.shape + (3,)), name="uniform")


@pytest.fixture(scope="session")
def relaxation_run():
    """50 steps of unforced relaxation on a 9^3 grid with the stray field on."""
    spec = GridSpec.unit(3, 9)
    return run_evolution(relaxation_data(spec), MaterialParams(), StepConfig(dt=1e-2, T_end=0.5), spec)


@pytest.fixture(scope="session")
def forced_run():
    """Body force and a time-dependent external field, stray field off."""
    spec = GridSpec.unit(3, 7)
    f = SpaceTimeField(lambda t, x: np.array([0.0, 0.0, -0.5]) * np.ones_like(x), name="uniform")

    def H(t, x):
        return np.sin(20 * t) * np.exp(-np.sum((x - 0.5) ** 2, axis=1) / 0.25)[:, None] * np.array([0.3, 0.0, 0.4])

    data = DataProviders(spec.coords.copy(), np.tile([0.6, 0.0, 0.8], (spec.num_nodes, 1)), f,
                         SpaceTimeField(H, name="gaussian"))
    return run_evolution(data, MaterialParams(stray=False), StepConfig(dt=1e-2, T_end=0.2), spec)
