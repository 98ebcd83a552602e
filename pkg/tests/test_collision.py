import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon

from lcew import collision as col
from lcew.trajdata import Scene


def _poly(box):
    return Polygon(box.corners())


def _shapely_overlap(a, b):
    pa, pb = _poly(a), _poly(b)
    return pa.intersects(pb) and not pa.touches(pb)


def _random_box(rng, rotated):
    heading = rng.uniform(-math.pi / 6, math.pi / 6) if rotated else 0.0
    return col.OBB(tuple(rng.uniform(-4, 4, 2)), rng.uniform(1.0, 3.0), rng.uniform(0.5, 1.2), heading)


# ---------------------------------------------------------------------------
# boxes


def test_rear_role_extension_example():
    box = col.build_obb(0.0, 0.0, 10.0, 0.0, 5.0, 1.8, rear_role=True)
    assert box.length == pytest.approx(11.0)
    assert box.width == pytest.approx(1.8)
    # rear face unchanged, extension points forward
    assert box.center[0] - box.half_length == pytest.approx(-2.5)


def test_no_extension_at_standstill_or_front_role():
    assert col.build_obb(0, 0, 0.0, 0.0, 5.0, 1.8, rear_role=True).length == 5.0
    assert col.build_obb(0, 0, 30.0, 0.0, 5.0, 1.8).length == 5.0


def test_identical_boxes_collide():
    a = col.OBB((0.0, 0.0), 2.0, 0.9)
    assert col.sat_collide(a, a)


def test_same_lane_boxes_ten_metres_apart():
    a, b = col.OBB((0.0, 0.0), 2.0, 0.9), col.OBB((10.0, 0.0), 2.0, 0.9)
    assert col.sat_gap(a, b) == pytest.approx(6.0)
    assert not col.sat_collide(a, b)


def test_touching_is_not_a_collision():
    a, b = col.OBB((0.0, 0.0), 2.0, 0.5), col.OBB((4.0, 0.0), 2.0, 0.5)
    assert col.sat_gap(a, b) == 0.0 and not col.sat_collide(a, b)


def test_detection_axes_use_lane_and_cut_in_heading():
    a, b = col.OBB((0, 0), 2, 1, 0.0), col.OBB((1, 1), 2, 1, 0.3)
    axes = col.detection_axes(a, b)
    np.testing.assert_allclose(axes[0], [1, 0])
    np.testing.assert_allclose(axes[2], [math.cos(0.3), math.sin(0.3)])


def test_sat_matches_shapely_with_one_lane_aligned_box():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(2000):
        a, b = _random_box(rng, False), _random_box(rng, True)
        gap = col.sat_gap(a, b)
        if abs(gap) < 1e-9:
            continue
        checked += 1
        assert col.sat_collide(a, b) == _shapely_overlap(a, b)
    assert checked > 1900


def test_exact_gap_matches_shapely_for_rotated_pairs():
    rng = np.random.default_rng(8)
    for _ in range(500):
        a, b = _random_box(rng, True), _random_box(rng, True)
        if abs(col.exact_gap(a, b)) > 1e-9:
            assert col.exact_overlap(a, b) == _shapely_overlap(a, b)


boxes = st.builds(
    col.OBB,
    st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    st.floats(0.5, 3.0),
    st.floats(0.3, 1.5),
    st.floats(-0.6, 0.6),
)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_sat_symmetric(a, b):
    assert col.sat_gap(a, b) == col.sat_gap(b, a)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes, st.integers(-100, 100), st.integers(-100, 100))
def test_sat_translation_invariant(a, b, dx, dy):
    assume(abs(col.sat_gap(a, b)) > 1e-9)
    move = lambda box: col.OBB((box.center[0] + dx, box.center[1] + dy), box.half_length,  # noqa: E731
                               box.half_width, box.heading)
    assert col.sat_collide(move(a), move(b)) == col.sat_collide(a, b)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes, st.floats(-math.pi, math.pi))
def test_sat_rotation_with_lane_frame(a, b, phi):
    assume(abs(col.sat_gap(a, b)) > 1e-6)
    c, s = math.cos(phi), math.sin(phi)

    def rot(box):
        x, y = box.center
        return col.OBB((c * x - s * y, s * x + c * y), box.half_length, box.half_width, box.heading + phi)

    assert col.sat_collide(rot(a), rot(b), lane_heading=phi) == col.sat_collide(a, b)


# ---------------------------------------------------------------------------
# predictions


def _scene(hist, ids=None, lengths=None):
    N = hist.shape[2]
    return Scene(0, list(ids or range(N)), hist, np.zeros((1, 2, N)), 0.0,
                 lengths=None if lengths is None else np.asarray(lengths, float))


def _straight(x0, y0, vx, vy, steps, dt=0.1, start=0):
    k = np.arange(start, start + steps)
    return np.stack([x0 + vx * dt * k, y0 + vy * dt * k])


def test_parallel_lanes_never_collide():
    T, F = 5, 30
    a = _straight(0, 0.0, 20, 0, T + F)
    b = _straight(1, 3.5, 20, 0, T + F)
    path = np.stack([a, b], axis=2).transpose(1, 0, 2)  # steps x 2 x N
    sc = _scene(path[:T])
    assert col.detect_collisions(path[T:], sc) == []


def test_crossing_contact_step_solved_by_hand():
    # side-by-side at equal x, vehicle 1 drifting toward vehicle 0 at 1 m/s
    T, F, dt = 5, 40, 0.1
    a = _straight(0, 0.0, 20, 0, T + F)
    b = _straight(0, 3.5, 20, -1.0, T + F)
    path = np.stack([a, b], axis=2).transpose(1, 0, 2)
    sc = _scene(path[:T], lengths=[4.5, 4.5])
    events = col.detect_collisions(path[T:], sc, widths=[1.8, 1.8])
    assert len(events) == 1

    th = math.atan2(-1.0 * dt, 20 * dt)
    hl, hw = 2.25, 0.9
    # equal x means no rear role; only the lateral axes can separate the boxes
    lateral = lambda dy: [  # noqa: E731
        dy - (hw + hl * abs(math.sin(th)) + hw * math.cos(th)),
        dy * math.cos(th) - (hl * abs(math.sin(th)) + hw * math.cos(th) + hw),
    ]
    f_star = next(f for f in range(F) if max(lateral(3.5 - 1.0 * dt * (T + f))) < 0)
    assert events[0].horizon_index == f_star
    assert events[0].step == T + 1 + f_star


def test_rear_role_extension_triggers_same_lane_event():
    # 30 m/s follower, 3 m bumper gap to a 30 m/s leader: 18 m buffer overlaps
    T, F = 3, 5
    a = _straight(0.0, 0.0, 30, 0, T + F)
    b = _straight(7.5, 0.0, 30, 0, T + F)
    path = np.stack([a, b], axis=2).transpose(1, 0, 2)
    sc = _scene(path[:T], lengths=[4.5, 4.5])
    (ev,) = col.detect_collisions(path[T:], sc)
    assert ev.horizon_index == 0
    assert col.detect_collisions(path[T:], sc, thw_buffer=0.0) == []


def _random_prediction(seed, N=4, T=4, F=10):
    rng = np.random.default_rng(seed)
    start = np.stack([rng.uniform(0, 30, N), rng.choice([0.0, 3.5], N)])
    vel = np.stack([rng.uniform(10, 30, N), rng.uniform(-1.5, 1.5, N)])
    k = np.arange(T + F)[:, None, None] * 0.1
    path = start[None] + vel[None] * k
    return path[:T], path[T:]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_events_invariant_to_relabeling(seed):
    hist, pred = _random_prediction(seed)
    ids = ["a", "b", "c", "d"]
    base = col.detect_collisions(pred, _scene(hist, ids))
    perm = np.random.default_rng(seed).permutation(4)
    sc = _scene(hist[:, :, perm], [ids[i] for i in perm])
    moved = col.detect_collisions(pred[:, :, perm], sc)
    assert [(e.pair, e.step) for e in base] == [(e.pair, e.step) for e in moved]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 0.6), st.floats(0.0, 1.0))
def test_larger_buffer_never_drops_a_collision(seed, small, extra):
    hist, pred = _random_prediction(seed)
    sc = _scene(hist)
    lo = {e.pair: e.step for e in col.detect_collisions(pred, sc, thw_buffer=small)}
    hi = {e.pair: e.step for e in col.detect_collisions(pred, sc, thw_buffer=small + extra)}
    for pair, step in lo.items():
        assert pair in hi and hi[pair] <= step


def test_heading_keeps_previous_on_tiny_steps():
    path = np.array([[0, 0], [1, 1], [1.01, 1.0], [1.01, 2.0]], dtype=float)
    h = col.estimate_headings(path, initial=0.0)
    assert h[1] == pytest.approx(math.pi / 4) and h[2] == h[1]
    assert h[3] == pytest.approx(math.pi / 2)


# ---------------------------------------------------------------------------
# warnings


def _event(x, step=25, pair=(1, 2)):
    return col.CollisionEvent(pair, step, step - 21, (x, 0.0))


def test_no_events_no_warning():
    assert col.issue_warning([], np.zeros((20, 2)), 20) is None


def test_event_ahead_is_front():
    ego = np.zeros((20, 2))
    ego[:, 0] = 100.0
    w = col.issue_warning([_event(115.0)], ego, 20)
    assert w.location is col.Location.FRONT and w.horizon_F == 20


def test_indirect_event_behind_is_rear():
    ego = np.full((20, 2), 0.0)
    ego[:, 0] = 100.0
    w = col.issue_warning([_event(60.0, pair=(7, 8))], ego, 20)
    assert w.location is col.Location.REAR and w.first_event.pair == (7, 8)


def test_earliest_event_wins_then_nearest():
    ego = np.zeros((20, 2))
    w = col.issue_warning([_event(-5.0, step=26), _event(30.0, step=25), _event(10.0, step=25)], ego, 20)
    assert w.first_event.location_hint[0] == 10.0 and w.location is col.Location.FRONT


def test_records_round_trip_through_json():
    import json
    ego = np.zeros((20, 2))
    w = col.issue_warning([_event(3.0)], ego, 20)
    rec = json.loads(col.to_jsonl([col.warning_record(w, "s")]))
    assert rec["P_c"] == "front" and rec["pair"] == [1, 2]
