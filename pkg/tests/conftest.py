import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slgs.scene import CameraView, look_at

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_view(eye=(0.0, 0.0, -4.0), target=(0.0, 0.0, 0.0), size=32, focal=40.0, name="v"):
    return CameraView(size, size, focal, focal, (size / 2, size / 2),
                      look_at(np.asarray(eye, float), np.asarray(target, float)), name=name)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def smooth_splat_scene(rng, m=8, size=16, channels=3):
    """Wide, semi-transparent Gaussians so the 1/255 cut-offs stay far from every pixel."""
    mean2d = rng.uniform(3, size - 3, (m, 2))
    angles = rng.uniform(0, np.pi, m)
    lam = rng.uniform(60, 200, (m, 2))
    c, s = np.cos(angles), np.sin(angles)
    a = lam[:, 0] * c * c + lam[:, 1] * s * s
    b = (lam[:, 0] - lam[:, 1]) * c * s
    cc = lam[:, 0] * s * s + lam[:, 1] * c * c
    cov = np.stack([a, b, cc], axis=1)
    opacity = rng.uniform(0.1, 0.6, m)
    feats = rng.normal(size=(m, channels))
    return mean2d, cov, opacity, feats


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_splat_scene(rng, max_gaussians=32, max_size=32, channels=17):
    """Arbitrary sorted 2D scene: sizes from sub-pixel to image-filling, opacities up to 1."""
    m = int(rng.integers(0, max_gaussians + 1))
    w, h = (int(v) for v in rng.integers(4, max_size + 1, 2))
    mean2d = rng.uniform(-4, [w + 4, h + 4], (m, 2))
    lam = np.exp(rng.uniform(np.log(0.3), np.log(150), (m, 2)))
    ang = rng.uniform(0, np.pi, m)
    c, s = np.cos(ang), np.sin(ang)
    cov = np.stack([lam[:, 0] * c * c + lam[:, 1] * s * s, (lam[:, 0] - lam[:, 1]) * c * s,
                    lam[:, 0] * s * s + lam[:, 1] * c * c], axis=1)
    opacity = rng.uniform(0, 1, m)
    feats = rng.normal(size=(m, channels))
    return [a.astype(np.float32) for a in (mean2d, cov, opacity, feats)] + [w, h]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
