import contextlib
import time

import hypothesis
import numpy as np
import pytest

_CRITERIA = {}

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """A tiny dataset plus one trained 2d case, shared by the metrics and CLI tests."""
    from precipcnn.cli import main

    root = tmp_path_factory.mktemp("run")
    data, run = root / "data", root / "run"
    assert main(["gen-synthetic", "--days", "90", "--grid", "6x6", "--levels", "500,850,925", "--seed", "3",
                 "--noise-std", "0.1", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--variant", "2d", "--timesteps", "ts2", "--levels", "500,850,925",
                 "--restarts", "2", "--max-epochs", "8", "--patience", "3", "--batch-size", "16",
                 "--conv-channels", "2,3", "--fc-hidden", "4", "--case", "tiny", "--out", str(run)]) == 0
    return data, run


@pytest.fixture
def criterion():
    """Context manager that times a block and records one PASS/FAIL line for it.

    The block yields a dict; set ``detail`` to add measured values to the line.
    The time limit is checked after the block.
    """
    @contextlib.contextmanager
    def run(number, title, limit_s):
        info = {"detail": ""}
        t0 = time.perf_counter()
        ok = False
        try:
            yield info
            ok = True
        finally:
            elapsed = time.perf_counter() - t0
            in_time = elapsed < limit_s
            status = "PASS" if ok and in_time else "FAIL"
            timing = f"{elapsed:.1f}s of {limit_s:g}s" + ("" if in_time else " (over limit)")
            _CRITERIA[number] = f"{status} criterion {number:>2}: {title} [{timing}] {info['detail']}".rstrip()
        assert in_time, _CRITERIA[number]
    return run


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
