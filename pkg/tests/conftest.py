import numpy as np
import pytest

from nafield.scene import FeaturedCloud


def random_cloud(rng, n=16, c=4, scale=0.1, labels=False):
    pts = rng.uniform(-scale, scale, (n, 3))
    feats = rng.standard_normal((n, c))
    lab = rng.integers(0, 3, n) if labels else None
    return FeaturedCloud(pts, feats, lab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.append(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
