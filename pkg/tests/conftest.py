import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ptdro.config import build_case, load_config  # noqa: E402


@pytest.fixture(scope="session")
def desk_config():
    return load_config("desk")


@pytest.fixture(scope="session")
def desk_case(desk_config):
    return build_case(desk_config)


@pytest.fixture(scope="session")
def fig4_config():
    return load_config("case33_fig4")


@pytest.fixture(scope="session")
def fig4_case(fig4_config):
    return build_case(fig4_config)


@pytest.fixture(scope="session")
def fig4_network(fig4_case):
    return fig4_case.network


@pytest.fixture(scope="session")
def fig4_pathsets(fig4_case):
    return fig4_case.pathsets


@pytest.fixture(scope="session")
def desk_robust(desk_config, desk_case):
    """Compact model and ambiguity set of the desk case."""
    from ptdro.assembler import assemble_centralized, compactify
    from ptdro.pipeline import build_uncertainty
    amb, _ = build_uncertainty(desk_config, desk_case)
    cm = compactify(assemble_centralized(desk_case), amb.e_de, amb.pv_de)
    return cm, amb


@pytest.fixture(scope="session")
def desk_benders(desk_robust):
    from ptdro.dro import benders_loop
    cm, amb = desk_robust
    return benders_loop(cm, amb, tol=1e-4, max_iters=50)


@pytest.fixture(scope="session")
def desk_dm(desk_case):
    from ptdro.baselines import solve_dm
    return solve_dm(desk_case)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance")
    for n in range(1, 10):
        if n in mod.RESULTS:
            ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
