"""Point-mass quadrotor with a layered controller and a pure-pursuit tracker.

Translational dynamics integrate the commanded thrust acceleration with
semi-implicit Euler. Attitude is not driven by torques; it follows the
commanded attitude through a first-order lag and is reported for logging
and camera placement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .core_types import (
    GRAVITY,
    Pose,
    RigidState,
    quat_conj,
    quat_exp,
    quat_from_euler,
    quat_log,
    quat_mul,
    quat_normalize,
    quat_slerp,
    quat_to_rotmat,
    rotmat_to_quat,
)
from .spline_planner import PiecewiseSpline, SplineRequest, plan_min_jerk_vel_constraints, sample, yaw_profile

Array = np.ndarray

MAX_DT = 0.02
HEADING_MIN_SPEED = 0.05


class DynamicsError(ValueError):
    pass


class InvalidDt(DynamicsError):
    pass


class NonFiniteCommand(DynamicsError):
    pass


class Mode(Enum):
    ANGLE_RATES_THRUST = "AngleRatesThrust"
    ANGLES_THRUST = "AnglesThrust"
    VELOCITY = "Velocity"
    POSITION = "Position"
    TRACK_TRAJECTORY = "TrackTrajectory"


@dataclass(frozen=True)
class PDGains:
    kp: float
    kd: float = 0.0


@dataclass(frozen=True)
class ControllerGains:
    """Cascade gains. Position loop outputs a velocity setpoint, velocity loop an acceleration."""

    position: PDGains = PDGains(2.0, 0.0)
    velocity: PDGains = PDGains(4.0, 0.0)
    angle_level: PDGains = PDGains(1.0 / 0.15)
    angle_rate: PDGains = PDGains(1.0 / 0.05)


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1.0
    drag_coeff: float = 0.1
    max_thrust_accel: float = 4 * 9.81
    attitude_time_constant: float = 0.15
    rate_time_constant: float = 0.05
    gains: ControllerGains = ControllerGains()

    def __post_init__(self):
        if min(self.mass, self.max_thrust_accel, self.attitude_time_constant, self.rate_time_constant) <= 0:
            raise ValueError("vehicle parameters must be positive")
        if self.drag_coeff < 0:
            raise ValueError("drag_coeff must be non-negative")

    # setters named after the familiar simulator API; each returns new params
    def set_position_controller_gains(self, kp: float, kd: float = 0.0) -> VehicleParams:
        return replace(self, gains=replace(self.gains, position=PDGains(kp, kd)))

    def set_velocity_controller_gains(self, kp: float, kd: float = 0.0) -> VehicleParams:
        return replace(self, gains=replace(self.gains, velocity=PDGains(kp, kd)))

    def set_angle_level_controller_gains(self, kp: float) -> VehicleParams:
        return replace(self, gains=replace(self.gains, angle_level=PDGains(kp)), attitude_time_constant=1.0 / kp)

    def set_angle_rate_controller_gains(self, kp: float) -> VehicleParams:
        return replace(self, gains=replace(self.gains, angle_rate=PDGains(kp)), rate_time_constant=1.0 / kp)


@dataclass(frozen=True)
class TrackerGains:
    kp_cross: float = 4.0
    kd_cross: float = 2.8
    kp_along: float = 4.0
    kd_along: float = 2.8
    kp_z: float = 4.0
    kd_z: float = 2.8
    lookahead_time: float = 0.1

    def __post_init__(self):
        if min(self.kp_cross, self.kd_cross, self.kp_along, self.kd_along, self.kp_z, self.kd_z,
               self.lookahead_time) < 0:
            raise ValueError("tracker gains must be non-negative")


@dataclass(frozen=True)
class ControlCommand:
    mode: Mode
    rates: Array | None = None
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    thrust: float = 0.0
    velocity: Array | None = None
    position: Array | None = None
    spline: PiecewiseSpline | None = None
    tracker: TrackerGains = TrackerGains()
    t_traj: float = 0.0

    @classmethod
    def angle_rates_thrust(cls, rates, thrust: float) -> ControlCommand:
        return cls(Mode.ANGLE_RATES_THRUST, rates=np.asarray(rates, dtype=float), thrust=thrust)

    @classmethod
    def angles_thrust(cls, roll: float, pitch: float, yaw: float, thrust: float) -> ControlCommand:
        return cls(Mode.ANGLES_THRUST, roll=roll, pitch=pitch, yaw=yaw, thrust=thrust)

    @classmethod
    def move_by_velocity(cls, velocity, yaw: float = 0.0) -> ControlCommand:
        return cls(Mode.VELOCITY, velocity=np.asarray(velocity, dtype=float), yaw=yaw)

    @classmethod
    def move_to_position(cls, position, yaw: float = 0.0) -> ControlCommand:
        return cls(Mode.POSITION, position=np.asarray(position, dtype=float), yaw=yaw)

    @classmethod
    def track_trajectory(cls, spline: PiecewiseSpline, t_traj: float, gains: TrackerGains = TrackerGains()) -> ControlCommand:
        return cls(Mode.TRACK_TRAJECTORY, spline=spline, t_traj=t_traj, tracker=gains)

    def validate(self) -> None:
        if self.mode in (Mode.ANGLES_THRUST, Mode.ANGLE_RATES_THRUST) and not 0.0 <= self.thrust <= 1.0:
            raise NonFiniteCommand("thrust fraction outside [0, 1]")
        scalars = [self.roll, self.pitch, self.yaw, self.thrust, self.t_traj]
        vecs = [v for v in (self.rates, self.velocity, self.position) if v is not None]
        if not all(math.isfinite(s) for s in scalars) or not all(np.all(np.isfinite(v)) for v in vecs):
            raise NonFiniteCommand(f"non-finite payload in {self.mode.value} command")
        required = {Mode.ANGLE_RATES_THRUST: self.rates, Mode.VELOCITY: self.velocity,
                    Mode.POSITION: self.position, Mode.TRACK_TRAJECTORY: self.spline}
        if self.mode in required and required[self.mode] is None:
            raise NonFiniteCommand(f"{self.mode.value} command missing its payload")


@dataclass(frozen=True)
class CascadeOutput:
    """Result of resolving a command.

    ``accel`` is the desired kinematic acceleration (gravity and drag
    excluded) for the upper-level modes; ``thrust_accel`` is set directly for
    the attitude-level modes, where the airframe tilt defines the force.
    """

    accel: Array | None
    attitude: Array
    thrust_accel: Array | None = None
    rates: Array | None = None


def _cross(a: Array, b: Array) -> Array:
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def attitude_from_accel(thrust_vec: Array, yaw: float) -> Array:
    """Attitude whose body +Z is along ``thrust_vec`` with the given heading."""
    n = np.linalg.norm(thrust_vec)
    zb = thrust_vec / n if n > 1e-9 else np.array([0.0, 0.0, 1.0])
    xc = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    yb = _cross(zb, xc)
    ny = math.sqrt(yb @ yb)
    if ny < 1e-9:
        return quat_from_euler(yaw)
    yb /= ny
    xb = _cross(yb, zb)
    return rotmat_to_quat(np.column_stack([xb, yb, zb]))


def resolve_cascade(state: RigidState, cmd: ControlCommand, params: VehicleParams) -> CascadeOutput:
    g = params.gains
    mode = cmd.mode
    if mode is Mode.ANGLES_THRUST:
        att = quat_from_euler(cmd.yaw, cmd.pitch, cmd.roll)
        return CascadeOutput(None, att, thrust_accel=None)
    if mode is Mode.ANGLE_RATES_THRUST:
        return CascadeOutput(None, state.pose.orientation, rates=np.asarray(cmd.rates, dtype=float))
    if mode is Mode.TRACK_TRAJECTORY:
        accel, yaw = pure_pursuit_track(state, cmd.spline, cmd.tracker, cmd.t_traj)
        return CascadeOutput(accel, attitude_from_accel(accel - GRAVITY, yaw))

    if mode is Mode.POSITION:
        err = cmd.position - state.position
        v_sp = g.position.kp * err - g.position.kd * state.velocity
    else:
        v_sp = cmd.velocity
    accel = g.velocity.kp * (v_sp - state.velocity) - g.velocity.kd * state.acceleration
    return CascadeOutput(accel, attitude_from_accel(accel - GRAVITY, cmd.yaw))


def clamp_thrust(thrust: Array, max_accel: float) -> Array:
    """Fit a thrust-acceleration vector into the envelope, keeping altitude authority first."""
    t = np.array(thrust, dtype=float)
    t[2] = max(t[2], 0.0)
    n = np.linalg.norm(t)
    if n <= max_accel:
        return t
    tz = min(t[2], max_accel)
    h = math.hypot(t[0], t[1])
    h_room = math.sqrt(max(max_accel * max_accel - tz * tz, 0.0))
    if h > 0:
        t[0] *= h_room / h
        t[1] *= h_room / h
    t[2] = tz
    return t


def step(state: RigidState, cmd: ControlCommand, params: VehicleParams, dt: float) -> RigidState:
    if not (0.0 < dt <= MAX_DT) or not math.isfinite(dt):
        raise InvalidDt(f"dt={dt} outside (0, {MAX_DT}]")
    cmd.validate()
    out = resolve_cascade(state, cmd, params)
    q = state.pose.orientation
    omega = state.angular_velocity

    if cmd.mode is Mode.ANGLE_RATES_THRUST:
        alpha = 1.0 - math.exp(-dt / params.rate_time_constant)
        omega = omega + alpha * (out.rates - omega)
        q_new = quat_normalize(quat_mul(q, quat_exp(omega * dt)))
        thrust = quat_to_rotmat(q_new)[:, 2] * cmd.thrust * params.max_thrust_accel
    elif cmd.mode is Mode.ANGLES_THRUST:
        alpha = 1.0 - math.exp(-dt / params.attitude_time_constant)
        q_new = quat_slerp(q, out.attitude, alpha)
        thrust = quat_to_rotmat(q_new)[:, 2] * cmd.thrust * params.max_thrust_accel
        omega = quat_log(quat_mul(quat_conj(q), q_new)) / dt
    else:
        alpha = 1.0 - math.exp(-dt / params.attitude_time_constant)
        q_new = quat_slerp(q, out.attitude, alpha)
        omega = quat_log(quat_mul(quat_conj(q), q_new)) / dt
        # feed-forward gravity and the known linear drag
        thrust = out.accel - GRAVITY + params.drag_coeff * state.velocity

    thrust = clamp_thrust(thrust, params.max_thrust_accel)
    accel = thrust + GRAVITY - params.drag_coeff * state.velocity
    v = state.velocity + accel * dt
    p = state.position + v * dt
    return RigidState(Pose(p, q_new), v, omega, state.timestamp + dt, accel)


# ---------------------------------------------------------------------------
# pure pursuit
# ---------------------------------------------------------------------------

def tracking_axes(ref_vel: Array, fallback_yaw: float = 0.0) -> tuple[Array, Array, Array]:
    """Along-track, cross-track and world-z unit vectors."""
    h = math.hypot(ref_vel[0], ref_vel[1])
    if h > HEADING_MIN_SPEED:
        along = np.array([ref_vel[0] / h, ref_vel[1] / h, 0.0])
    else:
        along = np.array([math.cos(fallback_yaw), math.sin(fallback_yaw), 0.0])
    cross = np.array([-along[1], along[0], 0.0])
    return along, cross, np.array([0.0, 0.0, 1.0])


def pure_pursuit_track(state: RigidState, spline: PiecewiseSpline, gains: TrackerGains,
                       t_now: float) -> tuple[Array, float]:
    """Acceleration command and yaw toward the lookahead reference."""
    t_ref = min(max(t_now, 0.0) + gains.lookahead_time, spline.total_duration)
    p_ref, v_ref, a_ref, _ = sample(spline, t_ref)
    yaw = yaw_profile(spline, t_ref)
    along, cross, up = tracking_axes(v_ref, yaw)
    ep = p_ref - state.position
    ev = v_ref - state.velocity
    accel = a_ref.copy()
    for axis, kp, kd in ((along, gains.kp_along, gains.kd_along),
                         (cross, gains.kp_cross, gains.kd_cross),
                         (up, gains.kp_z, gains.kd_z)):
        accel += (kp * float(ep @ axis) + kd * float(ev @ axis)) * axis
    return accel, yaw


def run_spline_mission(initial: RigidState, req: SplineRequest, gains: TrackerGains = TrackerGains(),
                       params: VehicleParams = VehicleParams(), dt: float = 0.005,
                       settle_time: float = 1.0) -> list[RigidState]:
    """Plan through ``req`` and fly it closed-loop; returns the state history.

    After the reference ends the tracker keeps holding the final point for
    ``settle_time`` seconds.
    """
    spline = plan_min_jerk_vel_constraints(req)
    return fly_spline(initial, spline, gains, params, dt, settle_time)


def fly_spline(initial: RigidState, spline: PiecewiseSpline, gains: TrackerGains = TrackerGains(),
               params: VehicleParams = VehicleParams(), dt: float = 0.005,
               settle_time: float = 1.0) -> list[RigidState]:
    n_steps = int(math.ceil((spline.total_duration + settle_time) / dt - 1e-9))
    t0 = initial.timestamp
    history = [initial]
    state = initial
    for k in range(n_steps):
        t_traj = min(k * dt, spline.total_duration)
        state = step(state, ControlCommand.track_trajectory(spline, t_traj, gains), params, dt)
        # re-derive the clock from the tick count so long runs do not drift
        state = replace(state, timestamp=t0 + (k + 1) * dt)
        history.append(state)
    return history


def write_state_csv(history, path) -> None:
    from .core_types import quat_to_euler

    with open(path, "w") as fh:
        fh.write("t,x,y,z,vx,vy,vz,yaw\n")
        for s in history:
            yaw = quat_to_euler(s.pose.orientation)[0]
            fh.write(",".join(f"{x:.6f}" for x in (s.timestamp, *s.position, *s.velocity, yaw)) + "\n")
