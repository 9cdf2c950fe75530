import numpy as np
import pytest

from sabl.geometry import Box


def random_box(rng, lo=0.0, hi=200.0, min_size=4.0, max_size=120.0) -> Box:
    w, h = rng.uniform(min_size, max_size, size=2)
    x1, y1 = rng.uniform(lo, hi, size=2)
    return Box(x1, y1, x1 + w, y1 + h)


def jittered(rng, gt: Box, scale: float = 0.15) -> Box:
    """Gaussian jitter of each coordinate, proportional to box size."""
    size = np.array([gt.width, gt.height] * 2)
    while True:
        c = np.array(gt.to_list()) + rng.normal(0.0, scale, 4) * size
        if c[2] > c[0] and c[3] > c[1]:
            return Box.from_seq(c)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, text: str) -> None:
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
