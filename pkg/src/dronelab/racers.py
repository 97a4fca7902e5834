"""Racer controllers and the closed-loop race driver.

A racer turns (time, own state, everyone's states) into a control command
once per tick. The driver steps every active racer through the dynamics,
hands the new states to the referee and streams the telemetry log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .baseline_opponents import GameParams, NoFeasibleCandidate, OpponentKind, ibr_plan, randomized_waypoints
from .core_types import Pose, RigidState, Track
from .flight_dynamics import ControlCommand, TrackerGains, VehicleParams, step
from .perception_baseline import (BaselineReference, GateCenterKF, PerceptionError, SingularConfiguration,
                                  estimate_center_3d, extract_corners, extract_gate_mask, kf_update,
                                  mask_touches_border)
from .race_orchestrator import Race, RaceConfig, RaceEvent, RacerDescriptor
from .seeding import rng_for
from .sensor_sim import CameraModel, Scene, render
from .spline_planner import InfeasibleLimits, PiecewiseSpline, SplineRequest, plan_min_jerk
from .track_metrics import metric_spline
from .tracks import course_waypoints

Array = np.ndarray

LEAD_IN = 4.0  # m behind gate 0 where racers start
LEAD_OUT = 3.0  # m past the last gate where trajectories end
START_SPACING = 2.0  # m between side-by-side starters
REPLAN_THRESHOLD = 0.5  # m shift of a filtered gate estimate that triggers a replan
INNOVATION_GATE = 16.27  # chi-square, 3 dof, 99.9%: farther detections are another gate
GAME_REPLAN_PERIOD = 0.5  # s between best-response replans while a rival is close
GAME_REPLAN_RANGE = 5.0  # m, rivals farther than this do not trigger periodic replans
GAME_COMMIT_DISTANCE = 1.5  # m from the next gate inside which the current approach is kept
GAME_LANE_MARGIN = 0.4  # m kept from the inner edge; covers the tracker's overshoot after a replan


def _clip_speed(v: Array, v_max: float) -> Array:
    s = float(np.linalg.norm(v))
    return v * (0.9 * v_max / s) if s > 0.9 * v_max else v


def _exit_point(points: Array, normal: Array) -> Array:
    return points[-1] + LEAD_OUT * normal


class Racer:
    """Base racer: follows ``self.spline`` from ``self.t0`` with pure pursuit."""

    def __init__(self, racer_id: str, v_max: float = 10.0, a_max: float = 15.0,
                 gains: TrackerGains = TrackerGains()):
        self.id = racer_id
        self.v_max = v_max
        self.a_max = a_max
        self.gains = gains
        self.spline: PiecewiseSpline | None = None
        self.t0 = 0.0

    def reset(self, race: Race, start: RigidState) -> None:
        raise NotImplementedError

    def _follow(self, route: Array, state: RigidState, t: float) -> None:
        # a fast start velocity pointing away from the new route can make the
        # limits unreachable by time scaling alone; hand more of it to the tracker
        v0 = _clip_speed(np.asarray(state.velocity, dtype=float), self.v_max)
        wps = np.vstack([state.position, route])
        for shrink in (1.0, 0.7, 0.4, 0.0):
            try:
                self.spline = plan_min_jerk(SplineRequest(wps, self.v_max, self.a_max, shrink * v0))
                break
            except InfeasibleLimits:
                if shrink == 0.0:
                    raise
        self.t0 = t

    def observe(self, t: float, me: RigidState, others: dict[str, RigidState], race: Race) -> None:
        """Hook for racers that replan; called before :meth:`command`."""

    def command(self, t: float, me: RigidState) -> ControlCommand:
        t_traj = min(max(t - self.t0, 0.0), self.spline.total_duration)
        return ControlCommand.track_trajectory(self.spline, t_traj, self.gains)


class SplineRacer(Racer):
    """moveOnSpline through fixed crossing points (reported gate centres by default)."""

    def __init__(self, racer_id: str, points: Array | None = None, **kw):
        super().__init__(racer_id, **kw)
        self.points = None if points is None else np.asarray(points, dtype=float)

    def reset(self, race: Race, start: RigidState) -> None:
        poses = race.gate_poses()
        pts = self.points if self.points is not None else np.array([p.position for p in poses])
        normal = poses[-1].rotation[:, 0]
        self._follow(np.vstack([pts, _exit_point(pts, normal)]), start, 0.0)


class PerceptionRacer(Racer):
    """Flies the reported (noisy) gates and corrects them with the camera pipeline.

    Each reported gate position seeds a Kalman filter with covariance
    ``prior_sigma**2`` and no process noise (gates do not move). Camera
    frames at ``rate_hz`` refine the next gate; detections failing the
    innovation gate are dropped. The trajectory is replanned when the estimate
    moves more than :data:`REPLAN_THRESHOLD` from the point planned through.
    """

    def __init__(self, racer_id: str, track: Track, prior_sigma: float, camera: CameraModel | None = None,
                 rate_hz: float = 30.0, dt: float = 0.005, **kw):
        super().__init__(racer_id, **kw)
        self.true_scene = Scene.from_track(track)
        self.camera = camera or CameraModel()
        self.prior_sigma = prior_sigma
        self.capture_every = max(int(round(1.0 / (rate_hz * dt))), 1)
        self.dt = dt
        self.replans = 0
        self.detections = 0

    def reset(self, race: Race, start: RigidState) -> None:
        self.race = race
        self.poses = race.gate_poses()
        self.gates = race.config.track.gates
        self.filters = [GateCenterKF.from_prior(p.position, self.prior_sigma, q=0.0) for p in self.poses]
        self.planned = np.array([p.position for p in self.poses])
        self.refs: dict[tuple, BaselineReference] = {}
        self.replans = 0
        self.detections = 0
        self._tick = 0
        self._route_from(0, start, 0.0)

    def _route_from(self, next_gate: int, state: RigidState, t: float) -> None:
        pts = self.planned[next_gate:]
        exit_pt = _exit_point(self.planned, self.poses[-1].rotation[:, 0])
        self._follow(np.vstack([pts, exit_pt]), state, t)

    def observe(self, t: float, me: RigidState, others: dict[str, RigidState], race: Race) -> None:
        k = self._tick
        self._tick += 1
        if k % self.capture_every:
            return
        last = race.last_gate_passed(self.id)
        gi = 0 if last is None else last + 1
        if gi >= len(self.gates):
            return
        frame = render(self.true_scene, self.camera, me.pose, t)
        try:
            mask = extract_gate_mask(frame)
            if mask_touches_border(mask):
                return
            corners = extract_corners(mask)
            gate = self.gates[gi]
            key = (gate.outer_width, gate.outer_height)
            if key not in self.refs:
                self.refs[key] = BaselineReference.for_gate(self.camera, gate)
            est = estimate_center_3d(corners, self.refs[key], self.camera, me.pose)
        except (PerceptionError, SingularConfiguration):
            return
        kf = self.filters[gi]
        innov = est - kf.state
        if float(innov @ np.linalg.solve(kf.covariance + kf.R, innov)) > INNOVATION_GATE:
            return
        self.detections += 1
        self.filters[gi] = kf_update(kf, est)
        if np.linalg.norm(self.filters[gi].state - self.planned[gi]) > REPLAN_THRESHOLD:
            self.planned[gi] = self.filters[gi].state
            self.replans += 1
            self._route_from(gi, me, t)


class GameTheoreticRacer(Racer):
    """Replans with iterated best response after every gate it passes.

    While a rival is within ``GAME_REPLAN_RANGE`` it also replans every
    ``GAME_REPLAN_PERIOD`` seconds so the plan reacts to where the rival is.
    """

    def __init__(self, racer_id: str, track: Track, seed: int = 0, params: GameParams | None = None, **kw):
        super().__init__(racer_id, **kw)
        self.track = track
        self.seed = seed
        self.params = params or GameParams(v_max=self.v_max, a_max=self.a_max, margin=GAME_LANE_MARGIN)
        self.metric = metric_spline(track)
        self.replans = 0

    def reset(self, race: Race, start: RigidState) -> None:
        self.replans = 0
        self._planned_for = None
        self.spline = None

    def observe(self, t: float, me: RigidState, others: dict[str, RigidState], race: Race) -> None:
        last = race.last_gate_passed(self.id)
        nxt = 0 if last is None else last + 1
        if nxt >= len(self.track.gates):
            return
        rivals = [(rid, s) for rid, s in others.items() if rid != self.id and race.progress[rid].active]
        opp_id, opp = min(rivals, key=lambda r: float(np.linalg.norm(r[1].position - me.position)),
                          default=(None, None))
        near = opp is not None and float(np.linalg.norm(opp.position - me.position)) < GAME_REPLAN_RANGE
        committed = float(np.linalg.norm(self.track.gates[nxt].center - me.position)) < GAME_COMMIT_DISTANCE
        due = near and not committed and t - self.t0 >= GAME_REPLAN_PERIOD - 1e-9
        # plan ran out without passing the gate (e.g. knocked off line by a frame hit)
        stale = self.spline is not None and t - self.t0 > self.spline.total_duration + GAME_REPLAN_PERIOD
        due = due or stale
        if nxt == self._planned_for and not due:
            return
        opp_last = race.last_gate_passed(opp_id) if opp_id else None
        opp_next = min(0 if opp_last is None else opp_last + 1, len(self.track.gates) - 1)
        rng = rng_for(self.seed, "ibr", self.replans)
        state = replace(me, velocity=_clip_speed(np.asarray(me.velocity, dtype=float), self.v_max))
        try:
            res = ibr_plan(self.track, state, opp, self.params, rng, nxt, opp_next, self.metric)
        except NoFeasibleCandidate:
            res = ibr_plan(self.track, state, None, self.params, rng, nxt, 0, self.metric)
        self.spline = res.spline
        self.t0 = t
        self._planned_for = nxt
        self.replans += 1


# ---------------------------------------------------------------------------
# race driver
# ---------------------------------------------------------------------------

@dataclass
class RaceOutcome:
    ranking: list[str]
    progress: dict
    events: list[RaceEvent]
    ticks: int
    final_states: dict[str, RigidState] = field(default_factory=dict)


def start_states(track: Track, n: int) -> list[RigidState]:
    """Side-by-side starts ``LEAD_IN`` metres behind gate 0, facing through it."""
    start, _ = course_waypoints(track, lead_in=LEAD_IN)
    g0 = track.gates[0]
    yaw = math.atan2(g0.normal[1], g0.normal[0])
    side = g0.pose.rotation[:, 1]
    offsets = (np.arange(n) - (n - 1) / 2.0) * START_SPACING
    return [RigidState.at(start - o * side, yaw) for o in offsets]


def run_race(config: RaceConfig, racers: list[Racer], log_path=None,
             params: VehicleParams = VehicleParams()) -> RaceOutcome:
    by_id = {r.id: r for r in racers}
    if set(by_id) != {d.id for d in config.racers}:
        raise ValueError("racers must match the config descriptors")
    race = Race(config, log_path).start()
    try:
        states = {d.id: d.start for d in config.racers}
        for d in config.racers:
            by_id[d.id].reset(race, d.start)
        dt = config.dt
        while not race.finished:
            k = race.tick_count
            t = k * dt
            new = {}
            for rid, st in states.items():
                if race.progress[rid].active:
                    racer = by_id[rid]
                    racer.observe(t, st, states, race)
                    nxt = step(st, racer.command(t, st), params, dt)
                    new[rid] = replace(nxt, timestamp=(k + 1) * dt)
                else:
                    new[rid] = replace(st, timestamp=(k + 1) * dt)
            states = new
            race.tick(states)
            race.write_log_tick(states)
        return RaceOutcome(race.ranking(), dict(race.progress), list(race.events), race.tick_count, states)
    finally:
        race.close()


def build_race(track: Track, tier: int = 1, opponent: str | OpponentKind = OpponentKind.NONE, seed: int = 0,
               noise_sigma: float = 1.0, dt: float = 0.005, v_max: float = 10.0, a_max: float = 15.0,
               opponent_v_max: float | None = None, camera: CameraModel | None = None,
               cutoff_time: float = 300.0, **config_kw) -> tuple[RaceConfig, list[Racer]]:
    """Racers and config for one tier: 1 planning, 2 perception, 3 both.

    The perception racer is used for tiers 2 and 3; tier 2 drops any opponent.
    Gate yaw noise scales with ``noise_sigma``: 5 degrees per metre of position noise.
    """
    kind = OpponentKind(opponent) if not isinstance(opponent, OpponentKind) else opponent
    if tier == 2:
        kind = OpponentKind.NONE
    n = 1 if kind is OpponentKind.NONE else 2
    starts = start_states(track, n)
    descs = [RacerDescriptor("drone_1", starts[0])]
    if tier == 1:
        ego: Racer = SplineRacer("drone_1", v_max=v_max, a_max=a_max)
    else:
        ego = PerceptionRacer("drone_1", track, noise_sigma, camera, dt=dt, v_max=v_max, a_max=a_max)
    racers = [ego]
    ov = opponent_v_max if opponent_v_max is not None else v_max
    if kind is OpponentKind.RANDOM_SPLINE:
        pts = randomized_waypoints(track, rng_for(seed, "opponent_waypoints"))
        racers.append(SplineRacer("drone_2", pts, v_max=ov, a_max=a_max))
    elif kind is OpponentKind.GAME_THEORETIC:
        racers.append(GameTheoreticRacer("drone_2", track, seed, v_max=ov, a_max=a_max))
    if n == 2:
        descs.append(RacerDescriptor("drone_2", starts[1]))
    config = RaceConfig(track, tuple(descs), tier=tier, rng_seed=seed, position_noise_sigma=noise_sigma,
                        yaw_noise_sigma=math.radians(5.0) * noise_sigma, dt=dt,
                        cutoff_time=cutoff_time, **config_kw)
    return config, racers
