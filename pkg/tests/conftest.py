import time

import pytest

from koopman_mhe import harness
from koopman_mhe.config import load_config

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _RESULTS[number] = (title, report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}")


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default experiment run once end to end, with wall-clock time per stage."""
    cfg = load_config().replace(out_dir=str(tmp_path_factory.mktemp("default_run")))
    stages = {}
    t0 = time.perf_counter()
    manifest = harness.cmd_generate(cfg)
    stages["generate"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    model = harness.cmd_fit(manifest, cfg.out_dir, cfg.train_gaits, cfg.sv_threshold,
                            cfg.scale_rows)
    stages["fit"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    openloop = harness.cmd_eval_openloop(model, manifest, cfg.eval_horizon, cfg.out_dir)
    stages["eval"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    estimate = harness.cmd_estimate(model, manifest, cfg)
    stages["estimate"] = time.perf_counter() - t0
    return {"cfg": cfg, "manifest": manifest, "model": model, "openloop": openloop,
            "estimate": estimate, "stages": stages}
