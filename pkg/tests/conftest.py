import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ball(shape, center, radius):
    z, y, x = np.ogrid[: shape[0], : shape[1], : shape[2]]
    c = center
    return ((z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2) <= radius * radius


ACCEPTANCE: dict[int, str] = {}


def record(n, title, ok, detail):
    ACCEPTANCE[n] = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
