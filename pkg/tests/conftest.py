import pytest

from gatsbi.config import Config
from gatsbi.harness import build_dataset
from gatsbi.synthetic import generate_dataset

SMALL = {
    "dataset": {"t_obs": 20, "horizons": [10], "stride": 15, "k_folds": 3},
    "generator": {"duration": 3.0, "agents": 5, "sigma_obs": 0.05, "warmup": 1.0},
    "model": {"hidden": 16},
    "train": {"epochs": 3, "batch_size": 16},
}


@pytest.fixture(scope="session")
def small_cfg():
    return Config.from_dict(SMALL)


@pytest.fixture(scope="session")
def small_scenes(small_cfg):
    return generate_dataset(small_cfg.generator, 6, seed=5)


@pytest.fixture(scope="session")
def small_data(small_cfg, small_scenes):
    return build_dataset(small_scenes, small_cfg, 10)


ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
