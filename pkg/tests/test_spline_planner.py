import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dronelab.spline_planner import (
    ConflictingConstraint,
    DegenerateWaypoints,
    InfeasibleLimits,
    OutOfRange,
    SplineRequest,
    VelocityConstraint,
    build_spline,
    hermite_quintic_matrix,
    jerk_cost,
    plan_min_jerk,
    plan_min_jerk_vel_constraints,
    sample,
    sample_many,
    write_spline_csv,
    yaw_profile,
    yaw_series,
)


def kkt_min_jerk(wps, durations, v0, fixed_vel=None):
    """Dense equality-constrained QP over raw monomial coefficients, one axis at a time.

    Unknowns are 6 coefficients per segment; constraints pin positions at both
    ends of every segment, C^2 continuity at interior knots, start velocity,
    zero start acceleration and rest at the end.
    """
    n = len(durations)
    fixed_vel = fixed_vel or {}
    out = np.zeros((n, 3, 6))
    for ax in range(3):
        H = np.zeros((6 * n, 6 * n))
        rows, rhs = [], []

        def basis(T, d):
            r = np.zeros(6)
            for k in range(d, 6):
                r[k] = math.perm(k, d) * T ** (k - d)
            return r

        for i, T in enumerate(durations):
            for a in range(3, 6):
                for b in range(3, 6):
                    ca, cb = a * (a - 1) * (a - 2), b * (b - 1) * (b - 2)
                    H[6 * i + a, 6 * i + b] = ca * cb * T ** (a + b - 5) / (a + b - 5)
            for tau, val in ((0.0, wps[i, ax]), (T, wps[i + 1, ax])):
                r = np.zeros(6 * n)
                r[6 * i:6 * i + 6] = basis(tau, 0)
                rows.append(r)
                rhs.append(val)
            if i + 1 < n:
                for d in (1, 2):
                    r = np.zeros(6 * n)
                    r[6 * i:6 * i + 6] = basis(T, d)
                    r[6 * i + 6:6 * i + 12] = -basis(0.0, d)
                    rows.append(r)
                    rhs.append(0.0)
                if i + 1 in fixed_vel:
                    r = np.zeros(6 * n)
                    r[6 * i + 6:6 * i + 12] = basis(0.0, 1)
                    rows.append(r)
                    rhs.append(fixed_vel[i + 1][ax])
        for seg, tau, d, val in ((0, 0.0, 1, v0[ax]), (0, 0.0, 2, 0.0),
                                 (n - 1, durations[-1], 1, 0.0), (n - 1, durations[-1], 2, 0.0)):
            r = np.zeros(6 * n)
            r[6 * seg:6 * seg + 6] = basis(tau, d)
            rows.append(r)
            rhs.append(val)
        A = np.array(rows)
        K = np.block([[H, A.T], [A, np.zeros((len(A), len(A)))]])
        sol = np.linalg.lstsq(K, np.concatenate([np.zeros(6 * n), rhs]), rcond=None)[0]
        out[:, ax, :] = sol[:6 * n].reshape(n, 6)
    return out


def test_hermite_matrix_interpolates_boundary_data(rng):
    T = 1.7
    M = hermite_quintic_matrix(T)
    data = rng.normal(size=6)
    c = M @ data
    at = lambda tau, d: sum(math.perm(k, d) * c[k] * tau ** (k - d) for k in range(d, 6))
    np.testing.assert_allclose([at(0, 0), at(0, 1), at(0, 2), at(T, 0), at(T, 1), at(T, 2)], data, atol=1e-10)


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_spline_matches_independent_qp(rng, n):
    wps = np.cumsum(rng.uniform(-5, 5, (n, 3)), axis=0)
    durations = rng.uniform(0.5, 2.0, n - 1)
    v0 = rng.normal(size=3)
    fixed = {(0, 1): v0, (0, 2): np.zeros(3), (n - 1, 1): np.zeros(3), (n - 1, 2): np.zeros(3)}
    sp = build_spline(wps, durations, fixed)
    ref = kkt_min_jerk(wps, durations, v0)
    np.testing.assert_allclose(sp.coeffs, ref, atol=1e-7 * max(1.0, np.abs(ref).max()))


def test_velocity_constraint_matches_qp(rng):
    wps = np.array([[0, 0, 5], [6, 2, 5], [12, -1, 6], [18, 0, 5.0]])
    req = SplineRequest(wps, 30, 15, constraints=(VelocityConstraint(1, [4.0, 0.5, 0.0]),))
    sp = plan_min_jerk_vel_constraints(req)
    _, v, _, _ = sample(sp, float(sp.knot_times[1]))
    np.testing.assert_allclose(v, [4.0, 0.5, 0.0], atol=1e-9)
    ref = kkt_min_jerk(wps, sp.durations, np.zeros(3), {1: np.array([4.0, 0.5, 0.0])})
    np.testing.assert_allclose(sp.coeffs, ref, atol=1e-7 * np.abs(ref).max())
    # the unconstrained variant ignores it
    free = plan_min_jerk(req)
    assert jerk_cost(free) <= jerk_cost(build_spline(wps, free.durations, {
        (0, 1): np.zeros(3), (0, 2): np.zeros(3), (3, 1): np.zeros(3), (3, 2): np.zeros(3),
        (1, 1): np.array([4.0, 0.5, 0.0])})) + 1e-9


@given(st.integers(0, 10_000))
def test_planned_spline_passes_waypoints_and_respects_limits(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 7))
    wps = np.cumsum(r.uniform(-10, 10, (n, 3)), axis=0)
    v_max, a_max = float(r.uniform(2, 30)), float(r.uniform(3, 20))
    sp = plan_min_jerk(SplineRequest(wps, v_max, a_max))
    for k, t in enumerate(sp.knot_times):
        np.testing.assert_allclose(sample(sp, float(t))[0], wps[k], atol=1e-8)
    ts = np.linspace(0, sp.total_duration, 4000)
    _, v, a, _ = sample_many(sp, ts)
    assert np.linalg.norm(v, axis=1).max() <= 1.02 * v_max
    assert np.linalg.norm(a, axis=1).max() <= 1.02 * a_max
    np.testing.assert_allclose(v[-1], 0, atol=1e-9)


def test_sample_many_agrees_with_sample(rng):
    sp = plan_min_jerk(SplineRequest(np.cumsum(rng.uniform(-5, 5, (5, 3)), axis=0)))
    ts = np.linspace(0, sp.total_duration, 37)
    batch = sample_many(sp, ts)
    for i, t in enumerate(ts):
        for a, b in zip(sample(sp, float(t)), batch):
            np.testing.assert_allclose(a, b[i], atol=1e-9)


def test_out_of_range_sampling():
    sp = plan_min_jerk(SplineRequest([[0, 0, 0], [1, 0, 0]]))
    with pytest.raises(OutOfRange):
        sample(sp, -1e-3)
    with pytest.raises(OutOfRange):
        sample_many(sp, [0.0, sp.total_duration + 1e-3])


@pytest.mark.parametrize("req, exc", [
    (SplineRequest([[0, 0, 0]]), DegenerateWaypoints),
    (SplineRequest([[0, 0, 0], [0, 0, 0]]), DegenerateWaypoints),
    (SplineRequest([[0, 0, 0], [np.nan, 0, 0]]), DegenerateWaypoints),
    (SplineRequest([[0, 0, 0], [1, 0, 0]], v_max=0), InfeasibleLimits),
    (SplineRequest([[0, 0, 0], [1, 0, 0], [2, 0, 0]], constraints=(VelocityConstraint(5, [0, 0, 0]),)),
     ConflictingConstraint),
    (SplineRequest([[0, 0, 0], [1, 0, 0], [2, 0, 0]], v_max=5, constraints=(VelocityConstraint(1, [9, 0, 0]),)),
     ConflictingConstraint),
])
def test_invalid_requests(req, exc):
    with pytest.raises(exc):
        plan_min_jerk_vel_constraints(req)


def test_yaw_follows_tangent_and_holds_when_hovering():
    sp = plan_min_jerk(SplineRequest([[0, 0, 0], [0, -5, 0]]))
    assert yaw_profile(sp, sp.total_duration / 2) == pytest.approx(-math.pi / 2, abs=1e-9)
    # zero speed at both ends: the end holds the last heading, the start takes the first one
    assert yaw_profile(sp, sp.total_duration) == pytest.approx(-math.pi / 2, abs=1e-9)
    assert yaw_profile(sp, 0.0) == pytest.approx(-math.pi / 2, abs=1e-9)
    ys = yaw_series(sp, np.linspace(0, sp.total_duration, 50))
    np.testing.assert_allclose(ys, -math.pi / 2, atol=1e-9)
    vertical = plan_min_jerk(SplineRequest([[0, 0, 0], [0, 0, 3]]))
    assert yaw_profile(vertical, 0.5) == 0.0


def test_csv_rows(tmp_path):
    sp = plan_min_jerk(SplineRequest([[0, 0, 0], [3, 0, 0]]))
    write_spline_csv(sp, tmp_path / "s.csv", rate=50)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,x,y,z,vx,vy,vz,ax,ay,az,yaw"
    last = [float(x) for x in lines[-1].split(",")]
    assert last[0] == pytest.approx(sp.total_duration, abs=1e-6)
    assert last[1] == pytest.approx(3.0, abs=1e-6)
