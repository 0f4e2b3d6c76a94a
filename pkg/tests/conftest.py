import numpy as np
import pytest

from mmmix.config import TrainConfig

# small enough that a full two-stage run takes well under a second
TINY = TrainConfig(
    seed=5, num_classes=4, points_per_cloud=32, fps_points=24, train_size=24, eval_size=12,
    dim=8, hidden=8, batch_size=6, epochs_stage1=2, epochs_stage2=2,
)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_fps(points, m, start):
    """Greedy max-min sampling, recomputing every min-distance from scratch."""
    chosen = [start]
    n = len(points)
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i in range(n):
            if i in chosen:
                continue
            d = min(float(np.linalg.norm(points[i] - points[c])) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


# one formatted line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
