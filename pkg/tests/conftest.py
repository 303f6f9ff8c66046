import time

import pytest

from priornet.cli import main

ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    failed = report.failed
    if report.when == "call" or failed:
        detail = ""
        if failed and report.longrepr is not None:
            crash = getattr(report.longrepr, "reprcrash", None)
            detail = crash.message.splitlines()[0] if crash else str(report.longrepr).splitlines()[-1]
        ACCEPTANCE[name] = ("FAIL" if failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n.split("-")[1])):
        status, detail = ACCEPTANCE[name]
        line = f"{name}: {status}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


class SyntheticRun:
    """``gen`` plus ``train dnn`` and ``train dpn`` with CLI defaults in one directory."""

    def __init__(self, root, sigma):
        self.root = root
        t0 = time.perf_counter()
        assert main(["gen", "--sigma", str(sigma), "--seed", "0", "--out", str(root)]) == 0
        for kind in ("dnn", "dpn"):
            argv = ["train", kind, "--data", str(root / "train.csv"), "--out", str(root / f"{kind}.json")]
            if kind == "dpn":
                argv += ["--ood", str(root / "ood_train.csv")]
            assert main(argv) == 0
        self.seconds = time.perf_counter() - t0

    def path(self, name):
        return str(self.root / name)


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    cache = {}

    def get(sigma):
        if sigma not in cache:
            cache[sigma] = SyntheticRun(tmp_path_factory.mktemp(f"sigma{sigma:g}"), sigma)
        return cache[sigma]

    return get
