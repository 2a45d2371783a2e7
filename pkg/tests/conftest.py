from __future__ import annotations

import numpy as np
import pytest

from gisplat.geometry import Intrinsics, Pose, se3_exp
from gisplat.gmap import GaussianMap, logit

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        prev = ACCEPTANCE_RESULTS.get(n)
        status = "PASS" if rep.outcome == "passed" else "FAIL"
        if prev is None or prev[1] == "PASS":
            ACCEPTANCE_RESULTS[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, status = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")


def random_scene(rng: np.random.Generator, n: int, center=(0.0, 0.0, 3.0), spread=(1.0, 0.8, 0.5),
                 scale=(0.05, 0.3), opacity=(0.3, 0.9)) -> GaussianMap:
    """Small random scene in front of the identity camera."""
    gm = GaussianMap(0)
    mu = np.asarray(center) + rng.uniform(-1, 1, (n, 3)) * np.asarray(spread)
    log_scale = np.log(rng.uniform(*scale, (n, 3)))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    gm.add(mu, log_scale, q, rng.uniform(0, 1, (n, 3)), logit(rng.uniform(*opacity, n)))
    return gm


def small_pose(rng: np.random.Generator, trans=0.05, rot=0.05) -> Pose:
    return se3_exp(np.concatenate([rng.uniform(-trans, trans, 3), rng.uniform(-rot, rot, 3)]))


@pytest.fixture
def k32() -> Intrinsics:
    return Intrinsics(30.0, 30.0, 15.5, 15.5, 32, 32)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
