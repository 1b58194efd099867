import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import null_space_optimality, quadrature_objective
from ndp_nmpc.quad_core import DEFAULT_PARAMS, quat_to_rot
from ndp_nmpc.trajectory import (FlatnessError, PiecewiseTrajectory, TrajectoryError, Waypoint, allocate_times,
                                 export_csv, flat_to_state, generate, min_snap, read_waypoints, serve_reference)

P = DEFAULT_PARAMS
WP = np.array([[0, 0, 1, 0], [1, 0.5, 1.2, 0.3], [2, -0.5, 1.0, -0.2], [3, 0, 1.5, 0.0]])


def test_allocate_times_examples():
    assert allocate_times([(0, 0, 0, 0), (2, 0, 0, 0)], 0.5)[-1] == pytest.approx(4.0)
    k = allocate_times([(0, 0, 0, 0), (1, 0, 0, 0), (2, 0, 0, 0)], 0.7)
    assert np.diff(k)[0] == pytest.approx(np.diff(k)[1])
    assert np.allclose(allocate_times([(0, 0, 0, 0), (1, 0, 0, 0), (1, 3, 0, 0)], 1.0), [0, 1, 4])


def test_allocate_times_rejects():
    with pytest.raises(TrajectoryError):
        allocate_times([(0, 0, 0, 0), (0, 0, 0, 1)], 1.0)
    with pytest.raises(TrajectoryError):
        allocate_times([(0, 0, 0, 0)], 1.0)
    with pytest.raises(TrajectoryError):
        allocate_times([(0, 0, 0, 0), (1, 0, 0, 0)], 0.0)


def test_single_segment_midpoint():
    tr = min_snap([(0, 0, 1, 0), (2, 0, 1, 0)], [0.0, 4.0])
    assert abs(tr.eval(2.0)[0] - 1.0) <= 1e-9


def test_waypoint_dataclass_accepted():
    tr = generate([Waypoint((0, 0, 1)), Waypoint((1, 0, 1), 0.5)], 1.0)
    assert np.allclose(tr.eval(tr.duration), [1, 0, 1, 0.5])


def test_interpolation_and_continuity():
    tr = generate(WP, 0.8)
    assert np.abs(tr.eval(tr.knots) - WP).max() <= 1e-8
    for t in tr.knots[1:-1]:
        for d in range(5):
            lo = tr.eval(t - 1e-12, d)
            hi = tr.eval(t + 1e-12, d)
            tol = 1e-6 * max(1.0, np.abs(lo).max())
            axes = range(4) if d <= 2 else range(3)
            for a in axes:
                assert abs(lo[a] - hi[a]) <= tol


def test_rest_to_rest_and_hold():
    tr = generate(WP, 0.8)
    for d in (1, 2, 3):
        assert np.allclose(tr.eval(0.0, d)[:3], 0, atol=1e-9)
        assert np.allclose(tr.eval(tr.duration, d)[:3], 0, atol=1e-9)
    assert np.allclose(tr.eval(tr.duration + 5.0), WP[-1])
    assert np.allclose(tr.eval(tr.duration + 5.0, 1), 0)
    with pytest.raises(ValueError):
        tr.eval(0.0, 5)


def test_objective_matches_quadrature():
    tr = generate(WP, 0.8)
    for axis in range(3):
        assert tr.objective(axis) == pytest.approx(quadrature_objective(tr, axis), rel=1e-6)
    assert tr.objective(3) == pytest.approx(quadrature_objective(tr, 3, deriv=2), rel=1e-6)


def test_null_space_optimality():
    rng = np.random.default_rng(7)
    assert all(null_space_optimality(rng) for _ in range(10))


def test_min_snap_rejects_bad_knots():
    with pytest.raises(TrajectoryError):
        min_snap(WP, [0, 1, 1, 2])
    with pytest.raises(TrajectoryError):
        min_snap(WP, [0, 1, 2])


def test_flat_hover_and_tilt():
    r = flat_to_state([0, 0, 1], [0, 0, 0], [0, 0, 0], 0.0)
    assert np.allclose(r.q, [1, 0, 0, 0]) and float(r.fc_ff) == pytest.approx(15.0525, abs=1e-4)
    r = flat_to_state([0, 0, 1], [0, 0, 0], [P.g, 0, 0], 0.0)
    assert float(r.fc_ff) == pytest.approx(math.sqrt(2) * P.weight) and float(r.fc_ff) == pytest.approx(21.29, abs=0.01)
    pitch = 2 * math.atan2(r.q[2], r.q[0])
    assert pitch == pytest.approx(math.pi / 4)


def test_flat_yaw_only():
    r = flat_to_state([0, 0, 1], [0, 0, 0], [0, 0, 0], 0.7)
    assert abs(r.q[1]) < 1e-12 and abs(r.q[2]) < 1e-12
    assert 2 * math.atan2(r.q[3], r.q[0]) == pytest.approx(0.7)


def test_flat_free_fall_rejected():
    with pytest.raises(FlatnessError):
        flat_to_state([0, 0, 0], [0, 0, 0], [0, 0, -P.g], 0.0)


@settings(max_examples=50)
@given(st.floats(-8, 8), st.floats(-8, 8), st.floats(-5, 8), st.floats(-3, 3))
def test_flat_thrust_direction(ax, ay, az, psi):
    a = np.array([ax, ay, az])
    thrust = a + [0, 0, P.g]
    if np.linalg.norm(thrust) <= 0.2 * P.g:
        return
    r = flat_to_state(np.zeros(3), np.zeros(3), a, psi)
    zb = quat_to_rot(r.q)[:, 2]
    assert np.allclose(zb, thrust / np.linalg.norm(thrust), atol=1e-9)
    assert float(r.fc_ff) == pytest.approx(P.m * np.linalg.norm(thrust))


def test_serve_stationary_and_hold():
    tr = generate([(0, 0, 1, 0), (0, 0, 2, 0)], 0.5)
    refs = serve_reference(tr, tr.duration + 1.0, 20, 0.1)
    assert len(refs) == 21
    assert np.allclose(refs.p, [0, 0, 2]) and np.allclose(refs.v, 0)
    assert np.allclose(refs.fc_ff, P.weight)
    with pytest.raises(ValueError):
        serve_reference(tr, 0.0, 0, 0.1)


def test_serve_shift_consistency():
    tr = generate(WP, 0.8)
    a = serve_reference(tr, 1.0, 20, 0.1)
    b = serve_reference(tr, 1.1, 20, 0.1)
    assert np.abs(a.x[1:] - b.x[:-1]).max() <= 1e-9
    assert np.abs(a.fc_ff[1:] - b.fc_ff[:-1]).max() <= 1e-9


def test_serve_matches_pointwise_flatness():
    # batched path against the scalar construction
    tr = generate(WP, 0.8)
    refs = serve_reference(tr, 0.3, 20, 0.17)
    for k in range(21):
        t = 0.3 + 0.17 * k
        f = flat_to_state(tr.eval(t)[:3], tr.eval(t, 1)[:3], tr.eval(t, 2)[:3], tr.eval(t)[3])
        q = f.q if f.q @ refs.q[k] > 0 else -f.q
        assert np.allclose(q, refs.q[k], atol=1e-12)
        assert float(f.fc_ff) == pytest.approx(refs.fc_ff[k], abs=1e-12)


def test_serve_quaternion_sign_continuity():
    # yaw sweeping past pi would flip w >= 0 quaternions; served sequences stay continuous
    tr = generate([(0, 0, 1, 0), (1, 0, 1, 3.0), (2, 0, 1, 6.0)], 0.3)
    refs = serve_reference(tr, 0.0, 80, 0.1)
    assert np.all(np.sum(refs.q[1:] * refs.q[:-1], axis=1) > 0)


def test_csv_round_trip(tmp_path):
    wp = tmp_path / "wp.csv"
    wp.write_text("x,y,z,psi\n" + "\n".join(",".join(str(v) for v in row) for row in WP) + "\n")
    assert np.allclose(read_waypoints(wp), WP)
    out = tmp_path / "traj.csv"
    tr = generate(read_waypoints(wp), 0.8)
    n = export_csv(tr, out, 0.05)
    lines = out.read_text().splitlines()
    assert lines[0] == "t,x,y,z,psi,vx,vy,vz,ax,ay,az"
    assert len(lines) == n + 1
    row = [float(v) for v in lines[3].split(",")]
    assert np.allclose(row[1:5], tr.eval(row[0]))
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(TrajectoryError):
        read_waypoints(bad)


def test_piecewise_is_immutable():
    tr = generate(WP, 0.8)
    assert isinstance(tr, PiecewiseTrajectory)
    with pytest.raises(AttributeError):
        tr.knots = None
