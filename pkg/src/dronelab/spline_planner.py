"""Minimum-jerk piecewise quintic trajectories through waypoints.

Each segment is a quintic in local time ``tau``. Positions are pinned at the
waypoints; velocities and accelerations at interior knots are free and are
chosen to minimise the integrated squared jerk, which yields a symmetric
positive definite banded system shared by the three axes. Sharing knot
derivatives between neighbouring segments makes the result C2 by
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

Array = np.ndarray

YAW_HOLD_SPEED = 0.05  # m/s, below this the horizontal heading is undefined
SCALE_STEP = 1.1
MAX_SCALE_ITERS = 20
LIMIT_CHECK_RATE = 1000.0  # Hz


class PlanningError(ValueError):
    pass


class DegenerateWaypoints(PlanningError):
    pass


class InfeasibleLimits(PlanningError):
    pass


class ConflictingConstraint(PlanningError):
    pass


class OutOfRange(PlanningError):
    pass


@dataclass(frozen=True)
class VelocityConstraint:
    waypoint_index: int
    velocity: Array

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class SplineRequest:
    waypoints: Array
    v_max: float = 30.0
    a_max: float = 15.0
    start_velocity: Array = field(default_factory=lambda: np.zeros(3))
    constraints: tuple[VelocityConstraint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "waypoints", np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "start_velocity", np.asarray(self.start_velocity, dtype=np.float64).reshape(3))
        object.__setattr__(self, "constraints", tuple(self.constraints))


@dataclass(frozen=True)
class PiecewiseSpline:
    """Quintic pieces; ``coeffs[i, axis, k]`` multiplies ``tau**k``."""

    durations: Array
    coeffs: Array

    def __post_init__(self):
        object.__setattr__(self, "knot_times", np.concatenate([[0.0], np.cumsum(self.durations)]))

    @property
    def total_duration(self) -> float:
        return float(self.knot_times[-1])

    @property
    def n_segments(self) -> int:
        return len(self.durations)

    @property
    def degree(self) -> int:
        return self.coeffs.shape[2] - 1


# ---------------------------------------------------------------------------
# quintic Hermite algebra
# ---------------------------------------------------------------------------

def hermite_quintic_matrix(T: float) -> Array:
    """6x6 map from ``[p0, v0, a0, p1, v1, a1]`` to ascending coefficients."""
    T2, T3, T4, T5 = T * T, T ** 3, T ** 4, T ** 5
    return np.array([
        [1, 0, 0, 0, 0, 0],
        [0, 1, 0, 0, 0, 0],
        [0, 0, 0.5, 0, 0, 0],
        [-10 / T3, -6 / T2, -1.5 / T, 10 / T3, -4 / T2, 0.5 / T],
        [15 / T4, 8 / T3, 1.5 / T2, -15 / T4, 7 / T3, -1 / T2],
        [-6 / T5, -3 / T4, -0.5 / T3, 6 / T5, -3 / T4, 0.5 / T3],
    ])


def jerk_gram(T: float) -> Array:
    """``Q`` with ``c^T Q c = integral_0^T jerk(tau)^2 dtau``."""
    Q = np.zeros((6, 6))
    for i in range(3, 6):
        for j in range(3, 6):
            ci = i * (i - 1) * (i - 2)
            cj = j * (j - 1) * (j - 2)
            p = i + j - 5
            Q[i, j] = ci * cj * T ** p / p
    return Q


def _segment_hessian(T: float) -> Array:
    M = hermite_quintic_matrix(T)
    return M.T @ jerk_gram(T) @ M


def _to_upper_band(A: Array) -> tuple[Array, int]:
    n = A.shape[0]
    nz = np.nonzero(np.abs(np.triu(A)) > 0)
    u = int(np.max(nz[1] - nz[0])) if len(nz[0]) else 0
    ab = np.zeros((u + 1, n))
    for k in range(u + 1):
        ab[u - k, k:] = np.diagonal(A, k)
    return ab, u


def solve_knot_derivatives(waypoints: Array, durations: Array, fixed: dict[tuple[int, int], Array]) -> Array:
    """Minimum-jerk knot velocities and accelerations.

    ``fixed`` maps ``(knot, order)`` with order 1 (velocity) or 2
    (acceleration) to a pinned 3-vector. Returns ``(n_knots, 3, 3)`` holding
    ``[position, velocity, acceleration]`` per knot.
    """
    n_knots = len(waypoints)
    n_var = 3 * n_knots
    H = np.zeros((n_var, n_var))
    for s, T in enumerate(durations):
        idx = slice(3 * s, 3 * s + 6)
        H[idx, idx] += _segment_hessian(float(T))

    values = np.zeros((n_var, 3))
    known = np.zeros(n_var, dtype=bool)
    for i in range(n_knots):
        values[3 * i] = waypoints[i]
        known[3 * i] = True
    for (i, order), v in fixed.items():
        values[3 * i + order] = v
        known[3 * i + order] = True

    free = np.flatnonzero(~known)
    if len(free):
        kn = np.flatnonzero(known)
        rhs = -H[np.ix_(free, kn)] @ values[kn]
        ab, _ = _to_upper_band(H[np.ix_(free, free)])
        values[free] = solveh_banded(ab, rhs)
    return values.reshape(n_knots, 3, 3)


def _coeffs_from_knots(knots: Array, durations: Array) -> Array:
    coeffs = np.empty((len(durations), 3, 6))
    for s, T in enumerate(durations):
        M = hermite_quintic_matrix(float(T))
        b = np.concatenate([knots[s], knots[s + 1]], axis=0)  # (6, 3)
        coeffs[s] = (M @ b).T
    return coeffs


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

_DERIV_FACTORS = [
    np.array([1, 1, 1, 1, 1, 1], dtype=float),
    np.array([1, 2, 3, 4, 5], dtype=float),
    np.array([2, 6, 12, 20], dtype=float),
    np.array([6, 24, 60], dtype=float),
]


def _locate(spline: PiecewiseSpline, t: Array) -> tuple[Array, Array]:
    seg = np.searchsorted(spline.knot_times, t, side="right") - 1
    seg = np.clip(seg, 0, spline.n_segments - 1)
    return seg, t - spline.knot_times[seg]


def _horner(c: Array, d: int, tau: Array) -> Array:
    """``d``-th derivative of per-sample polynomials ``c`` (m, 3, deg+1) at ``tau`` (m,)."""
    deg = c.shape[2] - 1
    if d > deg:
        return np.zeros(c.shape[:2])
    cd = c[:, :, d:] * _DERIV_FACTORS[d][: deg + 1 - d] if d else c
    t = tau[:, None]
    acc = cd[:, :, -1]
    for k in range(cd.shape[2] - 2, -1, -1):
        acc = acc * t + cd[:, :, k]
    return acc


def sample_many(spline: PiecewiseSpline, ts) -> tuple[Array, Array, Array, Array]:
    """Vectorised :func:`sample`; returns four ``(m, 3)`` arrays."""
    ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    if np.any(ts < 0.0) or np.any(ts > spline.total_duration):
        raise OutOfRange(f"t outside [0, {spline.total_duration}]")
    seg, tau = _locate(spline, ts)
    c = spline.coeffs[seg]  # (m, 3, deg+1)
    return tuple(_horner(c, d, tau) for d in range(4))


def sample(spline: PiecewiseSpline, t: float) -> tuple[Array, Array, Array, Array]:
    """Position, velocity, acceleration and jerk at time ``t``."""
    if not 0.0 <= t <= spline.total_duration:
        raise OutOfRange(f"t={t} outside [0, {spline.total_duration}]")
    s = min(int(np.searchsorted(spline.knot_times, t, side="right")) - 1, spline.n_segments - 1)
    tau = t - spline.knot_times[s]
    c = spline.coeffs[s]
    p = np.array([tau ** k for k in range(6)])
    pos = c @ p
    vel = c[:, 1:] @ (_DERIV_FACTORS[1] * p[:5])
    acc = c[:, 2:] @ (_DERIV_FACTORS[2] * p[:4])
    jerk = c[:, 3:] @ (_DERIV_FACTORS[3] * p[:3])
    return pos, vel, acc, jerk


def jerk_cost(spline: PiecewiseSpline) -> float:
    total = 0.0
    for s, T in enumerate(spline.durations):
        Q = jerk_gram(float(T))
        for a in range(3):
            c = spline.coeffs[s, a]
            total += float(c @ Q @ c)
    return total


def _sampled_peaks(spline: PiecewiseSpline, rate: float = LIMIT_CHECK_RATE) -> tuple[float, float]:
    n = max(2, int(math.ceil(spline.total_duration * rate)) + 1)
    ts = np.linspace(0.0, spline.total_duration, n)
    seg, tau = _locate(spline, ts)
    bounds = np.searchsorted(seg, np.arange(spline.n_segments + 1))
    deg = spline.coeffs.shape[2] - 1
    v2 = a2 = 0.0
    for s in range(spline.n_segments):
        t = tau[bounds[s]:bounds[s + 1]]
        if not t.size:
            continue
        V = np.vander(t, deg, increasing=True)  # powers 0 .. deg-1
        c = spline.coeffs[s]
        v = V @ (c[:, 1:] * _DERIV_FACTORS[1][:deg]).T
        a = V[:, : deg - 1] @ (c[:, 2:] * _DERIV_FACTORS[2][: deg - 1]).T
        v2 = max(v2, float(np.max(np.einsum("ij,ij->i", v, v))))
        a2 = max(a2, float(np.max(np.einsum("ij,ij->i", a, a))))
    return math.sqrt(v2), math.sqrt(a2)


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

def _validate(req: SplineRequest) -> None:
    if req.v_max <= 0 or req.a_max <= 0 or not (math.isfinite(req.v_max) and math.isfinite(req.a_max)):
        raise InfeasibleLimits("v_max and a_max must be positive")
    wp = req.waypoints
    if len(wp) < 2:
        raise DegenerateWaypoints("need at least two waypoints")
    if not np.all(np.isfinite(wp)):
        raise DegenerateWaypoints("non-finite waypoint")
    if np.any(np.linalg.norm(np.diff(wp, axis=0), axis=1) <= 1e-6):
        raise DegenerateWaypoints("consecutive waypoints coincide")
    for c in req.constraints:
        if not 0 <= c.waypoint_index < len(wp):
            raise ConflictingConstraint(f"constraint index {c.waypoint_index} out of range")
        if np.linalg.norm(c.velocity) > req.v_max * (1 + 1e-12):
            raise ConflictingConstraint(f"constraint speed exceeds v_max at waypoint {c.waypoint_index}")


def allocate_times(waypoints, v_max: float, a_max: float) -> Array:
    """Initial per-segment durations from a trapezoidal speed cap."""
    lengths = np.linalg.norm(np.diff(np.asarray(waypoints, dtype=np.float64), axis=0), axis=1)
    v_ref = np.minimum(v_max, np.sqrt(2.0 * a_max * lengths / 2.0))
    return lengths / v_ref


def _fixed_derivatives(req: SplineRequest) -> dict[tuple[int, int], Array]:
    n = len(req.waypoints)
    fixed = {
        (0, 1): req.start_velocity,
        (0, 2): np.zeros(3),
        (n - 1, 1): np.zeros(3),
        (n - 1, 2): np.zeros(3),
    }
    for c in req.constraints:
        fixed[(c.waypoint_index, 1)] = c.velocity
    return fixed


def build_spline(waypoints: Array, durations: Array, fixed: dict[tuple[int, int], Array]) -> PiecewiseSpline:
    durations = np.asarray(durations, dtype=np.float64)
    knots = solve_knot_derivatives(np.asarray(waypoints, dtype=np.float64), durations, fixed)
    return PiecewiseSpline(durations, _coeffs_from_knots(knots, durations))


def _plan(req: SplineRequest) -> PiecewiseSpline:
    _validate(req)
    fixed = _fixed_derivatives(req)
    durations = allocate_times(req.waypoints, req.v_max, req.a_max)
    prev_excess = math.inf
    for _ in range(MAX_SCALE_ITERS + 1):
        spline = build_spline(req.waypoints, durations, fixed)
        v_peak, a_peak = _sampled_peaks(spline)
        v_ratio, a_ratio = v_peak / req.v_max, a_peak / req.a_max
        if v_ratio <= 1.0 and a_ratio <= 1.0:
            return spline
        # a violation that slower timing no longer shrinks comes from the fixed
        # boundary velocities; stretching further would only waste samples
        excess = max(v_ratio, a_ratio)
        if excess > 0.99 * prev_excess:
            break
        prev_excess = excess
        # pure time scaling shrinks speed by s and acceleration by s^2, so
        # jump straight to that estimate when it exceeds the nominal step
        step = max(SCALE_STEP, min(4.0, max(v_ratio, math.sqrt(a_ratio))))
        durations = durations * step
    raise InfeasibleLimits(
        f"limits still violated after time scaling (peak v={v_peak:.3f}, a={a_peak:.3f})"
    )


def plan_min_jerk(req: SplineRequest) -> PiecewiseSpline:
    """Minimum-jerk spline ignoring any interior velocity constraints."""
    if req.constraints:
        req = SplineRequest(req.waypoints, req.v_max, req.a_max, req.start_velocity, ())
    return _plan(req)


def plan_min_jerk_vel_constraints(req: SplineRequest) -> PiecewiseSpline:
    return _plan(req)


# ---------------------------------------------------------------------------
# yaw
# ---------------------------------------------------------------------------

def yaw_profile(spline: PiecewiseSpline, t: float, hold_dt: float = 1e-3) -> float:
    """Heading that follows the horizontal tangent.

    When the horizontal speed is below ``YAW_HOLD_SPEED`` the most recent
    well-defined heading is held; if none exists yet, the first upcoming one
    is used, and 0 for a trajectory that never moves horizontally.
    """
    _, v, _, _ = sample(spline, t)
    if math.hypot(v[0], v[1]) >= YAW_HOLD_SPEED:
        return math.atan2(v[1], v[0])
    T = spline.total_duration
    for direction in (-1.0, 1.0):
        start = t
        while 0.0 <= start <= T:
            ts = np.clip(start + direction * hold_dt * np.arange(256), 0.0, T)
            _, vs, _, _ = sample_many(spline, ts)
            ok = np.flatnonzero(np.hypot(vs[:, 0], vs[:, 1]) >= YAW_HOLD_SPEED)
            if len(ok):
                v = vs[ok[0]]
                return math.atan2(v[1], v[0])
            if ts[-1] in (0.0, T):
                break
            start = ts[-1]
    return 0.0


def yaw_series(spline: PiecewiseSpline, ts: Array, initial_yaw: float = 0.0) -> Array:
    """Hold-last-value yaw over an increasing time grid."""
    _, v, _, _ = sample_many(spline, ts)
    hs = np.hypot(v[:, 0], v[:, 1])
    raw = np.arctan2(v[:, 1], v[:, 0])
    ok = hs >= YAW_HOLD_SPEED
    if not ok.any():
        return np.full(len(ts), initial_yaw)
    # forward-fill the last well-defined heading; leading gap takes the first one
    idx = np.where(ok, np.arange(len(ts)), -1)
    idx = np.maximum.accumulate(idx)
    idx[idx < 0] = np.flatnonzero(ok)[0]
    return raw[idx]


def spline_csv_rows(spline: PiecewiseSpline, rate: float = 100.0) -> list[tuple]:
    n = int(math.floor(spline.total_duration * rate)) + 1
    ts = np.arange(n) / rate
    if ts[-1] < spline.total_duration:
        ts = np.append(ts, spline.total_duration)
    p, v, a, _ = sample_many(spline, ts)
    yaw = yaw_series(spline, ts)
    return [(ts[i], *p[i], *v[i], *a[i], yaw[i]) for i in range(len(ts))]


def write_spline_csv(spline: PiecewiseSpline, path, rate: float = 100.0) -> None:
    with open(path, "w") as fh:
        fh.write("t,x,y,z,vx,vy,vz,ax,ay,az,yaw\n")
        for row in spline_csv_rows(spline, rate):
            fh.write(",".join(f"{x:.6f}" for x in row) + "\n")
