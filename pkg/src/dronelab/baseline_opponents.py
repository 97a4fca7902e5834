"""Opponents: randomised gate-crossing spline and a two-player best-response planner.

The game-theoretic planner is a plain iterated best response over sampled
strategies. A strategy fixes where a player crosses each of its next
``horizon`` gates and how fast it flies. Each player scores its own progress
lead at the end of a common horizon, minus a penalty for every sample where
it is within the collision radius of the other without leading it by more
than that radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .core_types import RigidState, Track, transform_point
from .spline_planner import PiecewiseSpline, PlanningError, SplineRequest, plan_min_jerk, sample_many
from .track_metrics import MetricSpline, metric_spline

Array = np.ndarray

DEFAULT_MARGIN = 0.2  # m kept clear of the inner edge


class OpponentKind(Enum):
    NONE = "none"
    RANDOM_SPLINE = "random_spline"
    GAME_THEORETIC = "game_theoretic"


class NoFeasibleCandidate(RuntimeError):
    pass


def offset_limits(gate, margin: float = DEFAULT_MARGIN) -> tuple[float, float]:
    """Half-ranges of admissible crossing offsets (local y, z); 0 when the gate is too small."""
    return max(gate.inner_width / 2 - margin, 0.0), max(gate.inner_height / 2 - margin, 0.0)


def crossing_point(gate, offset) -> Array:
    return transform_point(gate.pose, np.array([0.0, offset[0], offset[1]]))


def randomized_offsets(track: Track, rng: np.random.Generator, margin: float = DEFAULT_MARGIN) -> Array:
    out = np.zeros((len(track.gates), 2))
    for k, g in enumerate(track.gates):
        hy, hz = offset_limits(g, margin)
        out[k] = rng.uniform(-hy, hy), rng.uniform(-hz, hz)
    return out


def randomized_waypoints(track: Track, rng: np.random.Generator, margin: float = DEFAULT_MARGIN) -> Array:
    """One crossing point per gate, uniform over the inner rectangle shrunk by ``margin``."""
    offs = randomized_offsets(track, rng, margin)
    return np.array([crossing_point(g, o) for g, o in zip(track.gates, offs)])


# ---------------------------------------------------------------------------
# game-theoretic planner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GameParams:
    horizon: int = 3
    n_candidates: int = 32
    iteration_cap: int = 10
    collision_radius: float = 1.0
    penalty_weight: float = 100.0
    margin: float = DEFAULT_MARGIN
    speed_range: tuple[float, float] = (0.6, 1.0)
    v_max: float = 10.0
    a_max: float = 15.0
    eval_dt: float = 0.05
    # when set, candidates are an n x n grid of lane offsets (same at every gate) at full speed
    grid: int | None = None

    def __post_init__(self):
        if self.iteration_cap < 1 or self.horizon < 1 or self.n_candidates < 1:
            raise ValueError("horizon, candidate count and iteration cap must be >= 1")
        lo, hi = self.speed_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("speed scales must lie in (0, 1]")


@dataclass(frozen=True)
class StrategyProfile:
    offsets: Array  # (horizon, 2) crossing offsets in gate-local (y, z)
    speed_scale: float = 1.0

    def distance(self, other: StrategyProfile) -> float:
        return float(np.max(np.abs(self.offsets - other.offsets), initial=0.0)
                     + abs(self.speed_scale - other.speed_scale))


@dataclass
class _Player:
    state: RigidState
    gates: list[int]
    profiles: list[StrategyProfile]
    splines: list[PiecewiseSpline]
    positions: list[Array] = field(default_factory=list)  # sampled on the common grid
    progress: list[Array] = field(default_factory=list)


@dataclass(frozen=True)
class IBRResult:
    profile: StrategyProfile
    spline: PiecewiseSpline
    score: float
    opponent_profile: StrategyProfile | None
    iterations: int
    history: tuple[float, ...]  # my best-response score at each of my moves
    candidates: tuple[StrategyProfile, ...]
    candidate_scores: tuple[float, ...]  # my candidates scored against the final opponent profile


def horizon_gates(track: Track, next_gate: int, horizon: int) -> list[int]:
    return list(range(next_gate, min(next_gate + horizon, len(track.gates))))


def sample_profiles(track: Track, gates: list[int], params: GameParams, rng: np.random.Generator) -> list[StrategyProfile]:
    """Candidate set; the first entry is always the centre line at full speed."""
    nominal = StrategyProfile(np.zeros((len(gates), 2)), 1.0)
    out = [nominal]
    if params.grid:
        lim = np.array([offset_limits(track.gates[gi], params.margin) for gi in gates])
        for fy in np.linspace(-1.0, 1.0, params.grid):
            for fz in np.linspace(-1.0, 1.0, params.grid):
                out.append(StrategyProfile(lim * (fy, fz), 1.0))
        return out
    lo, hi = params.speed_range
    for _ in range(params.n_candidates - 1):
        offs = np.array([rng.uniform(-l, l) for gi in gates for l in offset_limits(track.gates[gi], params.margin)])
        out.append(StrategyProfile(offs.reshape(len(gates), 2), float(rng.uniform(lo, hi))))
    return out


def realize(track: Track, state: RigidState, gates: list[int], profile: StrategyProfile,
            params: GameParams, lead_out: float = 3.0) -> PiecewiseSpline:
    """moveOnSpline trajectory from ``state`` through the offset gate points."""
    pts = [crossing_point(track.gates[gi], o) for gi, o in zip(gates, profile.offsets)]
    if gates and gates[-1] == len(track.gates) - 1:
        last = track.gates[-1]
        pts.append(pts[-1] + lead_out * last.normal)
    v_max = params.v_max * profile.speed_scale
    v0 = np.asarray(state.velocity, dtype=float)
    speed = float(np.linalg.norm(v0))
    if speed > 0.9 * v_max:
        v0 = v0 * (0.9 * v_max / speed)
    req = SplineRequest(np.vstack([state.position, pts]), v_max, params.a_max, v0)
    return plan_min_jerk(req)


def _positions(spline: PiecewiseSpline, ts: Array) -> Array:
    p, _, _, _ = sample_many(spline, np.minimum(ts, spline.total_duration))
    return p


class _Progress:
    """Arc length of the closest point on the metric spline."""

    def __init__(self, ms: MetricSpline):
        self.arc = ms.arc
        self.tree = cKDTree(ms.curve(ms.params))

    def __call__(self, pts: Array) -> Array:
        _, idx = self.tree.query(pts)
        return self.arc[idx]


def _score(me_pos: Array, me_prog: Array, opp_pos: Array | None, opp_prog: Array | None,
           params: GameParams) -> float:
    if opp_pos is None:
        return float(me_prog[-1])
    close = np.linalg.norm(me_pos - opp_pos, axis=1) < params.collision_radius
    # a lead shorter than the collision radius is side-by-side, so it still counts as trailing
    trailing = me_prog <= opp_prog + params.collision_radius
    return float(me_prog[-1] - opp_prog[-1]) - params.penalty_weight * int(np.count_nonzero(close & trailing))


def _best_response(player: _Player, other: _Player | None, other_idx: int, params: GameParams) -> tuple[int, float]:
    best_i, best_s = 0, -math.inf
    for i in range(len(player.profiles)):
        if other is None:
            s = _score(player.positions[i], player.progress[i], None, None, params)
        else:
            s = _score(player.positions[i], player.progress[i], other.positions[other_idx],
                       other.progress[other_idx], params)
        if s > best_s:
            best_i, best_s = i, s
    return best_i, best_s


def ibr_plan(track: Track, my_state: RigidState, opp_state: RigidState | None, params: GameParams = GameParams(),
             rng: np.random.Generator | None = None, my_next_gate: int = 0, opp_next_gate: int = 0,
             progress_spline: MetricSpline | None = None) -> IBRResult:
    """Iterated best response between me and one opponent over the next gates.

    Each iteration lets the opponent respond to my current plan and then lets
    me respond to the opponent's. The returned plan is my best response with
    the highest score seen over all iterations, so a larger iteration cap can
    only improve it. ``opp_state=None`` (or an opponent at infinite distance)
    means no opponent; the penalty term then vanishes.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ms = progress_spline or metric_spline(track)
    progress = _Progress(ms)
    if opp_state is not None and not np.all(np.isfinite(opp_state.position)):
        opp_state = None

    def make_player(state, next_gate):
        gates = horizon_gates(track, next_gate, params.horizon)
        if not gates:
            raise NoFeasibleCandidate("no gates left to plan through")
        profiles, splines = [], []
        for prof in sample_profiles(track, gates, params, rng):
            try:
                splines.append(realize(track, state, gates, prof, params))
                profiles.append(prof)
            except PlanningError:
                continue
        if not profiles:
            raise NoFeasibleCandidate("no candidate trajectory could be planned")
        return _Player(state, gates, profiles, splines)

    me = make_player(my_state, my_next_gate)
    opp = make_player(opp_state, opp_next_gate) if opp_state is not None else None
    durations = [s.total_duration for s in me.splines] + ([s.total_duration for s in opp.splines] if opp else [])
    horizon_t = min(durations)
    ts = np.arange(0.0, horizon_t + 1e-12, params.eval_dt)
    if ts[-1] < horizon_t - 1e-12:
        ts = np.append(ts, horizon_t)
    for pl in (me, opp) if opp else (me,):
        pl.positions = [_positions(s, ts) for s in pl.splines]
        pl.progress = [progress(p) for p in pl.positions]

    if opp is not None and np.linalg.norm(my_state.position - opp_state.position) < params.collision_radius:
        raise NoFeasibleCandidate("players start inside the collision radius")

    me_i, opp_i = 0, 0
    history: list[float] = []
    best = (-math.inf, 0, None)
    iterations = 0
    for it in range(params.iteration_cap):
        iterations = it + 1
        changed = False
        if opp is not None:
            new_opp, _ = _best_response(opp, me, me_i, params)
            changed |= opp.profiles[new_opp].distance(opp.profiles[opp_i]) >= 1e-3
            opp_i = new_opp
        new_me, s_me = _best_response(me, opp, opp_i, params)
        changed |= me.profiles[new_me].distance(me.profiles[me_i]) >= 1e-3
        me_i = new_me
        history.append(s_me)
        if s_me > best[0]:
            best = (s_me, me_i, opp_i)
        if not changed and it > 0:
            break
    score, bi, bo = best
    final_scores = tuple(
        _score(me.positions[i], me.progress[i],
               opp.positions[bo] if opp else None, opp.progress[bo] if opp else None, params)
        for i in range(len(me.profiles)))
    return IBRResult(me.profiles[bi], me.splines[bi], score, opp.profiles[bo] if opp else None,
                     iterations, tuple(history), tuple(me.profiles), final_scores)
