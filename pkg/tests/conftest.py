import pytest

from cotrain.ontology import build_bank, build_ontology, expand_all
from cotrain.oracle import OracleConfig, ScriptedOracle
from cotrain.tasks import GenConfig, generate_dataset


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(GenConfig(), seed=0)


@pytest.fixture(scope="session")
def clean_oracle():
    return ScriptedOracle(OracleConfig(flip_noise=0.0, spurious_rate=0.0))


@pytest.fixture(scope="session")
def clean_world(dataset, clean_oracle):
    """Bank, goal plans, ground-truth ontology and plan pool from a noise-free oracle."""
    bank, goal_plans = build_bank(dataset, clean_oracle)
    graph = build_ontology(bank, clean_oracle, n_queries=5)
    pool = expand_all(goal_plans, graph)
    return bank, goal_plans, graph, pool


# -- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    rep = outcome.get_result()
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[n]
        line = f"criterion {n:>2} {verdict}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
