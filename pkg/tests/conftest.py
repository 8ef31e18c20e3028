import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from corrguide.domain import CorrespondenceField, GridShape, Status

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_field(rng: np.random.Generator, shape: GridShape, p_unmatched=0.1, p_outlier=0.1) -> CorrespondenceField:
    u = rng.random((shape.h, shape.w))
    status = np.where(u < p_unmatched, Status.UNMATCHED, np.where(u < p_unmatched + p_outlier, Status.OUTLIER, Status.INLIER))
    coords = np.stack([rng.integers(0, shape.h, (shape.h, shape.w)), rng.integers(0, shape.w, (shape.h, shape.w))], axis=-1)
    coords = np.where(status[..., None] == Status.UNMATCHED, -1, coords)
    consensus = np.where(status == Status.INLIER, rng.random((shape.h, shape.w)) + 0.1, 0.0)
    return CorrespondenceField(shape, status, coords, consensus)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        ok, detail = RESULTS[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2} {detail}")
