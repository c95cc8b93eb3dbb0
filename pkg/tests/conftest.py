import math

import numpy as np
import pytest

from rvdet.boxgeom import OrientedBox
from rvdet.rangeview import SensorConfig


@pytest.fixture
def sensor():
    return SensorConfig.reference()


def random_box(rng, center_scale=20.0, min_size=0.5, max_size=5.0) -> OrientedBox:
    return OrientedBox(
        rng.uniform(-center_scale, center_scale),
        rng.uniform(-center_scale, center_scale),
        rng.uniform(-math.pi, math.pi),
        rng.uniform(min_size, max_size),
        rng.uniform(min_size, max_size),
    )


def mc_iou(a: OrientedBox, b: OrientedBox, n: int, rng) -> float:
    """Monte-Carlo IoU: uniform samples inside ``a`` tested against ``b``."""
    u = rng.uniform(-0.5, 0.5, n) * a.length
    v = rng.uniform(-0.5, 0.5, n) * a.width
    ca, sa = math.cos(a.yaw), math.sin(a.yaw)
    x = a.cx + ca * u - sa * v
    y = a.cy + sa * u + ca * v
    cb, sb = math.cos(b.yaw), math.sin(b.yaw)
    dx, dy = x - b.cx, y - b.cy
    ub = cb * dx + sb * dy
    vb = -sb * dx + cb * dy
    frac = np.mean((np.abs(ub) <= 0.5 * b.length) & (np.abs(vb) <= 0.5 * b.width))
    inter = frac * a.area
    return inter / (a.area + b.area - inter)


def overlapping_pair(rng):
    a = random_box(rng, center_scale=5.0)
    b = OrientedBox(
        a.cx + rng.normal(0, 1.0), a.cy + rng.normal(0, 1.0), rng.uniform(-math.pi, math.pi),
        rng.uniform(0.5, 5.0), rng.uniform(0.5, 5.0),
    )
    return a, b


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
