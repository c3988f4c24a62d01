import numpy as np
import pytest

from forest_coreg.geometry import Pose, se3_exp


def random_twist(rng, max_angle=np.pi - 0.1, trans_scale=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * rng.uniform(0.0, max_angle)
    return np.concatenate([rng.normal(0.0, trans_scale, 3), phi])


def random_pose(rng, max_angle=np.pi - 0.1, trans_scale=5.0):
    return se3_exp(random_twist(rng, max_angle, trans_scale))


def yaw(theta, t=(0.0, 0.0, 0.0)):
    return Pose.from_rotvec([0.0, 0.0, theta], t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    import re
    import sys

    lines = dict(getattr(sys.modules.get("test_acceptance"), "RESULTS", {}))
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m and int(m.group(1)) not in lines:
                lines[int(m.group(1))] = f"criterion {m.group(1)}: FAIL  ({rep.when} raised before a verdict)"
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
