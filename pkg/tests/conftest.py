import numpy as np
import pytest
import torch

import risamodal.diffusion as diffusion
import risamodal.pipeline as pipeline

torch.set_num_threads(1)

# every finalize_shape call in the session is checked for containment
CONTAINMENT = {"calls": 0, "violations": 0}
_finalize = diffusion.finalize_shape


def _checked_finalize(chi_0_raw, chi_v):
    out = _finalize(chi_0_raw, chi_v)
    cv = np.asarray(chi_v).astype(np.int8)
    CONTAINMENT["calls"] += 1
    if not np.array_equal(out * cv, cv):
        CONTAINMENT["violations"] += 1
    return out


diffusion.finalize_shape = _checked_finalize
pipeline.finalize_shape = _checked_finalize


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"AC{number:02d} {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_collection_modifyitems(session, config, items):
    # acceptance runs last so the containment check sees the whole suite
    items.sort(key=lambda it: "test_acceptance.py" in it.nodeid.split("::")[0])


def pytest_terminal_summary(terminalreporter):
    terminalreporter.write_line(
        f"containment: {CONTAINMENT['calls']} finalized shapes, {CONTAINMENT['violations']} violations")
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"AC{n:02d} {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_sessionfinish(session, exitstatus):
    if CONTAINMENT["violations"]:
        session.exitstatus = 1


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
