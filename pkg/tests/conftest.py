import numpy as np
import pytest
import torch

from splatstyle.backbone import TinyBackbone
from splatstyle.toy import single_camera, style_pattern, toy_cameras, toy_scene


@pytest.fixture(scope="session")
def tiny():
    return TinyBackbone(seed=0)


@pytest.fixture(scope="session")
def tiny64():
    return TinyBackbone(seed=0, dtype=torch.float64)


@pytest.fixture
def scene():
    return toy_scene(100, seed=0)


@pytest.fixture
def cameras():
    return toy_cameras(4, size=32)


@pytest.fixture
def front_camera():
    return single_camera(32)


@pytest.fixture
def style():
    return style_pattern(32, "stripes")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



# criterion number -> (outcome, title); filled by acceptance tests via user_properties
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        detail = props.get("title", "")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail += f" ({report.longrepr[2]})"
        _ACCEPTANCE[props["criterion"]] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {outcome}  {detail}")
