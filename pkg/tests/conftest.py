from __future__ import annotations

import numpy as np
import pytest

from radoninv.core import ImageGeometry, SinogramGeometry


@pytest.fixture(scope="session")
def desk_igeom():
    return ImageGeometry.square(64)


@pytest.fixture(scope="session")
def desk_sgeom():
    return SinogramGeometry(100, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def disk_image(geom: ImageGeometry, radius: float, value: float = 1.0, supersample: int = 1):
    """Disk of ``radius`` (length units); with ``supersample`` > 1, area-weighted edges."""
    k = supersample
    n = geom.width
    sub = (np.arange(n * k) + 0.5) / k - n / 2
    x, y = np.meshgrid(sub * geom.pixel_size, -sub * geom.pixel_size)
    inside = (x * x + y * y <= radius * radius).astype(float)
    return value * inside.reshape(n, k, n, k).mean(axis=(1, 3))


ACCEPTANCE_LINES: dict[str, str] = {}


def report(criterion: str, passed: bool, detail: str) -> bool:
    """Record one acceptance line; printed again in the terminal summary."""
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
