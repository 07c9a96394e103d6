import numpy as np
import pytest

from tempreg.deform import VelocityField
from tempreg.phantom import smooth_random_field
from tempreg.volume import Volume3


def smooth_volume(rng, dims, sigma=2.0, scale=10.0, offset=50.0):
    from scipy import ndimage

    noise = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="reflect")
    return Volume3(offset + scale * noise / noise.std())


def blob(dims, center, sigma, amplitude=100.0, base=0.0):
    g = np.indices(dims, dtype=np.float64)
    r2 = sum((g[a] - center[a]) ** 2 for a in range(3))
    return Volume3(base + amplitude * np.exp(-r2 / (2.0 * sigma**2)))


def random_velocity(rng, dims, amplitude, sigma=4.0):
    return VelocityField(smooth_random_field(rng, dims, sigma, amplitude))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    """Record one pass/fail line per acceptance criterion (also echoed at session end)."""

    def log(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
