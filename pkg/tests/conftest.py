import numpy as np
import pytest

from lcew.trajdata import LaneGeometry, VehicleTrack

DT = 0.1


def make_track(vid, x, y, length=4.5, width=1.8, t0=0.0):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    t = t0 + DT * np.arange(x.size)
    return VehicleTrack(vid, length, width, t, x, y, np.gradient(x, t), np.gradient(y, t))


def lane_change_track(vid=1, hold_before=5.0, sweep=4.0, hold_after=5.0, speed=20.0, lane_width=3.5,
                      x0=0.0, y0=0.0, t0=0.0):
    """Hold a lane, cosine sweep one lane to the left, hold the new lane."""
    n = int(round((hold_before + sweep + hold_after) / DT)) + 1
    t = DT * np.arange(n)
    s = np.clip((t - hold_before) / sweep, 0.0, 1.0)
    y = y0 + lane_width * 0.5 * (1.0 - np.cos(np.pi * s))
    return make_track(vid, x0 + speed * t, y, t0=t0)


@pytest.fixture
def lanes():
    return LaneGeometry.straight(3, 3.5, length=5000.0, first_id=0)


def overfit_scene(T=8, F=12, N=4, seed=0):
    """Small interacting scene: three vehicles at constant speed and one merging sideways."""
    from lcew.trajdata import Scene

    rng = np.random.default_rng(seed)
    t = DT * np.arange(T + F)
    x = rng.uniform(0, 40, N)[None] + rng.uniform(15, 25, N)[None] * t[:, None]
    y = np.tile(np.arange(N) % 2 * 3.5, (T + F, 1))
    s = np.clip((t - t[0]) / t[-1], 0, 1)
    y[:, 0] = 3.5 * 0.5 * (1 - np.cos(np.pi * s))
    pos = np.stack([x, y], axis=1)  # (T+F) x 2 x N
    return Scene(0, list(range(N)), pos[:T], pos[T:], 0.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
