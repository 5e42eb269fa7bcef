import numpy as np
import pytest

from cffe.dgp import Constant, DgpSpec, generate_panel
from cffe.forest import ForestConfig, fit_forest


def small_spec(**kw) -> DgpSpec:
    base = dict(n_treated=6, n_control=8, year_range=(1990, 2012), default_adoption_year=2000, seed=7)
    base.update(kw)
    return DgpSpec(**base)


@pytest.fixture(scope="session")
def small_panel():
    return generate_panel(small_spec())


@pytest.fixture(scope="session")
def noiseless_panel():
    return generate_panel(DgpSpec(sigma_eps=0.0, seed=11))


@pytest.fixture(scope="session")
def small_forest(small_panel):
    ds, _ = small_panel
    return fit_forest(ds, ForestConfig(n_trees=60, min_leaf=10, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# Acceptance criteria record their sub-checks here; the terminal summary
# folds them into one PASS/FAIL line per criterion.
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, name: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((name, bool(ok), detail))
    print(f"criterion {criterion} [{name}]: {'PASS' if ok else 'FAIL'} {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[crit]
        verdict = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        summary = "; ".join(f"{name}={'ok' if ok else 'FAIL'}" + (f" ({d})" if d else "")
                            for name, ok, d in checks)
        terminalreporter.write_line(f"CRITERION {crit:2d} {verdict}: {summary}")
