import numpy as np
import pytest

from pointtopo import geometry, shapes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def cube_surface(side=1.0, spacing=0.05):
    return shapes.sample_surface(shapes.box((side / 2,) * 3, center=(side / 2,) * 3), spacing)


def sphere_surface(radius=0.5, spacing=0.02):
    return shapes.sample_surface(shapes.sphere(radius), spacing)


def random_cloud(n, rng, spread=1.0, h=0.25, boundary_fraction=0.0):
    X = rng.uniform(-spread, spread, (n, 3))
    flags = rng.random(n) < boundary_fraction
    return geometry.build_neighbors(geometry.ParticleCloud(X, np.full(n, 0.01), flags, h))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, line
    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(line(number))
