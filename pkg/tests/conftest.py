import os
import sys
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from semslam.scenario import load_config, run_scenario  # noqa: E402

_SESSION_START = time.perf_counter()
SUITE_BUDGET_S = 60.0
SHORT_FRAMES = 60

# (criterion, passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance():
    def record(name, passed, detail):
        ACCEPTANCE.append((name, bool(passed), detail))
        return passed

    return record


def short_config(noiseless=False):
    """The packaged loop scenario cut to SHORT_FRAMES frames."""
    from semslam.world_sim import NoiseConfig

    cfg = load_config(None)
    cfg.trajectory["frames"] = SHORT_FRAMES
    if noiseless:
        cfg.noise = NoiseConfig.noiseless(cfg.seed)
    return cfg


def _timed_run(cfg, out_dir, **kw):
    t0 = time.perf_counter()
    out = run_scenario(cfg, str(out_dir), **kw)
    out["elapsed"] = time.perf_counter() - t0
    out["dir"] = str(out_dir)
    return out


@pytest.fixture(scope="session")
def packaged_run(tmp_path_factory):
    """Full pipeline on the packaged loop scenario (noisy, 200 frames)."""
    return _timed_run(load_config(None), tmp_path_factory.mktemp("packaged"))


@pytest.fixture(scope="session")
def short_runs(tmp_path_factory):
    """Two identical full runs and one landmarks-disabled run of the short loop."""
    return {
        "full_a": _timed_run(short_config(), tmp_path_factory.mktemp("short_a")),
        "full_b": _timed_run(short_config(), tmp_path_factory.mktemp("short_b")),
        "disabled": _timed_run(short_config(), tmp_path_factory.mktemp("short_off"), disable_landmarks=True),
    }


@pytest.fixture(scope="session")
def zero_noise_run(tmp_path_factory):
    return _timed_run(short_config(noiseless=True), tmp_path_factory.mktemp("zero_noise"))


def pytest_terminal_summary(terminalreporter):
    elapsed = time.perf_counter() - _SESSION_START
    rows = list(ACCEPTANCE)
    if not rows:
        return
    rows.append(("full test suite < 60 s", elapsed < SUITE_BUDGET_S, f"{elapsed:.1f} s"))
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in rows:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  [{detail}]")
