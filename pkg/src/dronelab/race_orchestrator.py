"""Race orchestration: gate passes, penalties, disqualification, ranking and telemetry.

A :class:`Race` owns one :class:`RacerProgress` per racer and advances on
:meth:`Race.tick`. Every tick also appends one telemetry line per racer to
the log, flushed immediately so a killed process leaves a parseable prefix.
"""

from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .core_types import Pose, RigidState, Track, quat_from_euler, quat_mul, vec3
from .seeding import rng_for

log = logging.getLogger(__name__)

COLLISION_BAND_HALF_THICKNESS = 0.1  # m, distance to gate plane that counts as touching the frame
REARM_CLEAR_TIME = 0.5  # s
LOG_VERSION = "drl-log v1"
MAX_RACERS = 8


class RaceError(RuntimeError):
    pass


class RaceNotStarted(RaceError):
    pass


class InvalidConfig(ValueError):
    pass


class SinkWriteFailure(RaceError):
    pass


class EventKind(Enum):
    GATE_PASS = "GatePass"
    ENV_COLLISION = "EnvCollision"
    DRONE_DRONE_COLLISION = "DroneDroneCollision"
    NEAR_MISS = "NearMiss"
    FINISH = "Finish"
    DISQUALIFIED = "Disqualified"


@dataclass(frozen=True)
class RaceEvent:
    time: float
    kind: EventKind
    racer_id: str
    detail: object = None


@dataclass(frozen=True)
class RacerDescriptor:
    id: str
    start: RigidState


@dataclass(frozen=True)
class RaceConfig:
    track: Track
    racers: tuple[RacerDescriptor, ...]
    tier: int = 1
    collision_penalty: float = 10.0
    near_miss_radius: float = 1.0
    dq_contact_radius: float = 0.3
    rng_seed: int = 0
    position_noise_sigma: float = 1.0
    yaw_noise_sigma: float = math.radians(5.0)
    cutoff_time: float = 300.0
    dt: float = 0.005

    def validate(self) -> None:
        if self.tier not in (1, 2, 3):
            raise InvalidConfig(f"tier must be 1, 2 or 3, got {self.tier}")
        if not 1 <= len(self.racers) <= MAX_RACERS:
            raise InvalidConfig(f"between 1 and {MAX_RACERS} racers required")
        ids = [r.id for r in self.racers]
        if len(set(ids)) != len(ids) or any(not i or any(c.isspace() for c in i) for i in ids):
            raise InvalidConfig("racer ids must be unique, non-empty and whitespace-free")
        if self.collision_penalty < 0:
            raise InvalidConfig("collision penalty must be non-negative")
        if self.near_miss_radius <= 0 or self.dq_contact_radius <= 0:
            raise InvalidConfig("radii must be positive")
        if self.position_noise_sigma < 0 or self.yaw_noise_sigma < 0:
            raise InvalidConfig("noise sigmas must be non-negative")
        if not 0 < self.dt <= 0.02 or self.cutoff_time <= 0:
            raise InvalidConfig("dt must lie in (0, 0.02] and cutoff must be positive")
        if not 0 <= self.rng_seed < 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")


@dataclass
class RacerProgress:
    racer_id: str
    gates_passed: int = 0
    last_gate_passed: int | None = None
    gate_split_times: list[float] = field(default_factory=list)
    penalty_seconds: float = 0.0
    disqualified: bool = False
    finish_time: float | None = None
    env_collisions: int = 0

    @property
    def active(self) -> bool:
        return not self.disqualified and self.finish_time is None


# ---------------------------------------------------------------------------
# geometry predicates
# ---------------------------------------------------------------------------

def detect_gate_pass(prev, curr, gate) -> tuple[bool, np.ndarray | None]:
    """Did the segment ``prev -> curr`` fly through ``gate`` along its +X normal?"""
    R = gate.pose.rotation
    a = R.T @ (np.asarray(prev, dtype=float) - gate.center)
    b = R.T @ (np.asarray(curr, dtype=float) - gate.center)
    if not (a[0] < 0.0 <= b[0]):
        return False, None
    s = -a[0] / (b[0] - a[0])
    hit = a + s * (b - a)
    if abs(hit[1]) < gate.inner_width / 2 and abs(hit[2]) < gate.inner_height / 2:
        return True, R @ hit + gate.center
    return False, None


class _GateArrays:
    """Gate geometry stacked for vectorised per-tick tests."""

    def __init__(self, track: Track):
        self.centers = np.array([g.center for g in track.gates])
        self.rots = np.array([g.pose.rotation for g in track.gates])
        self.inner = np.array([[g.inner_width / 2, g.inner_height / 2] for g in track.gates])
        self.outer = np.array([[g.outer_width / 2, g.outer_height / 2] for g in track.gates])
        self.bounds = track.world_bounds

    def local(self, p: np.ndarray) -> np.ndarray:
        return np.einsum("gji,gj->gi", self.rots, p - self.centers)

    def frame_contact(self, prev: np.ndarray, curr: np.ndarray) -> bool:
        """True when the point or the swept segment touches any frame band."""
        a, b = self.local(prev), self.local(curr)
        near = np.abs(b[:, 0]) < COLLISION_BAND_HALF_THICKNESS
        if np.any(near & self._in_band(b[:, 1:])):
            return True
        crossing = (a[:, 0] < 0) != (b[:, 0] < 0)
        if np.any(crossing):
            den = b[:, 0] - a[:, 0]
            s = np.where(crossing, -a[:, 0] / np.where(den == 0, 1, den), 0.0)
            hit = a[:, 1:] + s[:, None] * (b[:, 1:] - a[:, 1:])
            if np.any(crossing & self._in_band(hit)):
                return True
        return False

    def _in_band(self, yz: np.ndarray) -> np.ndarray:
        ay, az = np.abs(yz[:, 0]), np.abs(yz[:, 1])
        in_outer = (ay <= self.outer[:, 0]) & (az <= self.outer[:, 1])
        in_inner = (ay < self.inner[:, 0]) & (az < self.inner[:, 1])
        return in_outer & ~in_inner

    def out_of_bounds(self, p: np.ndarray) -> bool:
        return not self.bounds.contains(p)


# ---------------------------------------------------------------------------
# noisy gate poses
# ---------------------------------------------------------------------------

def noisy_gate_poses(track: Track, tier: int, rng: np.random.Generator,
                     position_sigma: float = 1.0, yaw_sigma: float = math.radians(5.0)) -> list[Pose]:
    """Gate poses as reported to racers: exact for tier 1, corrupted once for tiers 2 and 3."""
    truth = [g.pose for g in track.gates]
    if tier == 1:
        return truth
    out = []
    for pose in truth:
        dp = rng.normal(0.0, 1.0, 3) * position_sigma
        dyaw = rng.normal(0.0, 1.0) * yaw_sigma
        q = quat_mul(quat_from_euler(dyaw), pose.orientation)
        out.append(Pose(pose.position + dp, q))
    return out


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

def adjusted_time(p: RacerProgress, cutoff: float) -> float:
    base = p.finish_time if p.finish_time is not None else cutoff
    return base + p.penalty_seconds


def rank_key(p: RacerProgress, cutoff: float) -> tuple:
    return (p.disqualified, -p.gates_passed, adjusted_time(p, cutoff), p.racer_id)


def rank(progresses, cutoff: float = math.inf) -> list[str]:
    """Disqualified last, then most gates, then lowest time plus penalties, then id."""
    return [p.racer_id for p in sorted(progresses, key=lambda p: rank_key(p, cutoff))]


def format_leaderboard(progresses, cutoff: float = math.inf) -> str:
    """Ranked table, one racer per line: position, id, gates, adjusted time, penalties, status."""
    by_id = {p.racer_id: p for p in progresses}
    lines = ["rank racer gates time_s penalty_s status"]
    for pos, rid in enumerate(rank(by_id.values(), cutoff), start=1):
        p = by_id[rid]
        status = "dq" if p.disqualified else ("finished" if p.finish_time is not None else "dnf")
        lines.append(f"{pos} {rid} {p.gates_passed} {adjusted_time(p, cutoff):.3f} {p.penalty_seconds:.3f} {status}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# telemetry log
# ---------------------------------------------------------------------------

def format_header(track_name: str, tier: int, seed: int) -> str:
    return f"# {LOG_VERSION} track={track_name} tier={tier} seed={seed}\n"


def format_meta(n_gates: int, cutoff: float, penalty: float, dt: float) -> str:
    return f"# gates={n_gates} cutoff_s={cutoff:.3f} collision_penalty_s={penalty:.3f} dt_s={dt:.6f}\n"


def format_line(t: float, p: RacerProgress, state: RigidState) -> str:
    x, y, z = state.position
    vx, vy, vz = state.velocity
    last = -1 if p.last_gate_passed is None else p.last_gate_passed
    return (f"{t:.3f} {p.racer_id} {x:.4f} {y:.4f} {z:.4f} {vx:.4f} {vy:.4f} {vz:.4f} "
            f"{p.gates_passed} {last} {p.penalty_seconds:.3f} {int(p.disqualified)}\n")


# ---------------------------------------------------------------------------
# the race
# ---------------------------------------------------------------------------

class Race:
    """Referee for one race on one track.

    ``log_path`` may be a path (opened on start, rotated on reset) or an
    already-open text stream; ``None`` disables logging.
    """

    def __init__(self, config: RaceConfig, log_path=None):
        config.validate()
        self.config = config
        self._log_target = log_path
        self._sink: io.TextIOBase | None = None
        self._owns_sink = False
        self._gates = _GateArrays(config.track)
        self.started = False
        self.reported_gate_poses: list[Pose] = []
        self._resets = 0

    # -- lifecycle ---------------------------------------------------------
    def start(self) -> Race:
        cfg = self.config
        self.tick_count = 0
        self.time = 0.0
        self.events: list[RaceEvent] = []
        self.progress = {r.id: RacerProgress(r.id) for r in cfg.racers}
        self._prev = {r.id: r.start.position.copy() for r in cfg.racers}
        self._last_contact: dict[str, float | None] = {r.id: None for r in cfg.racers}
        self._pair_contact: dict[tuple[str, str], bool] = {}
        self._pair_near: dict[tuple[str, str], bool] = {}
        rng = rng_for(cfg.rng_seed, "gate_noise")
        self.reported_gate_poses = noisy_gate_poses(cfg.track, cfg.tier, rng, cfg.position_noise_sigma,
                                                    cfg.yaw_noise_sigma)
        self._open_sink()
        self.started = True
        return self

    def reset(self) -> Race:
        self.close()
        if isinstance(self._log_target, (str, os.PathLike)):
            path = Path(self._log_target)
            if path.exists():
                self._resets += 1
                path.replace(path.with_name(f"{path.name}.{self._resets}"))
        return self.start()

    def close(self) -> None:
        if self._sink is not None and self._owns_sink:
            self._sink.close()
        self._sink = None
        self.started = False

    def _open_sink(self) -> None:
        cfg = self.config
        if self._log_target is None:
            self._sink = None
            return
        if isinstance(self._log_target, (str, os.PathLike)):
            self._sink = open(self._log_target, "w")
            self._owns_sink = True
        else:
            self._sink = self._log_target
            self._owns_sink = False
        self._write(format_header(cfg.track.name, cfg.tier, cfg.rng_seed)
                    + format_meta(len(cfg.track.gates), cfg.cutoff_time, cfg.collision_penalty, cfg.dt))

    def _write(self, text: str) -> None:
        if self._sink is None:
            return
        try:
            self._sink.write(text)
            self._sink.flush()
        except (OSError, ValueError) as exc:
            raise SinkWriteFailure(str(exc)) from exc

    @property
    def finished(self) -> bool:
        return (all(not p.active for p in self.progress.values())
                or self.time >= self.config.cutoff_time - 1e-9)

    # -- API views ---------------------------------------------------------
    def gate_poses(self) -> list[Pose]:
        return list(self.reported_gate_poses)

    def last_gate_passed(self, racer_id: str) -> int | None:
        return self.progress[racer_id].last_gate_passed

    def is_disqualified(self, racer_id: str) -> bool:
        return self.progress[racer_id].disqualified

    # -- refereeing --------------------------------------------------------
    def _trailing(self, a: str, b: str, pos: dict[str, np.ndarray]) -> str:
        gates = self.config.track.gates

        def lead(rid):
            p = self.progress[rid]
            nxt = min(p.gates_passed, len(gates) - 1)
            return (p.gates_passed, -float(np.linalg.norm(pos[rid] - gates[nxt].center)))

        la, lb = lead(a), lead(b)
        if la == lb:
            return max(a, b)
        return a if la < lb else b

    def tick(self, states: dict[str, RigidState]) -> list[RaceEvent]:
        """Advance the referee by one ``dt`` given every racer's new state."""
        if not self.started:
            raise RaceNotStarted("call start() before tick()")
        cfg = self.config
        self.tick_count += 1
        t = self.tick_count * cfg.dt
        self.time = t
        events: list[RaceEvent] = []
        gates = cfg.track.gates
        pos = {rid: np.asarray(states[rid].position, dtype=float) for rid in self.progress}

        for rid, prog in self.progress.items():
            if not prog.active:
                continue
            prev, curr = self._prev[rid], pos[rid]
            nxt = prog.gates_passed
            passed, point = detect_gate_pass(prev, curr, gates[nxt])
            if passed:
                prog.gates_passed += 1
                prog.last_gate_passed = nxt
                prog.gate_split_times.append(t)
                events.append(RaceEvent(t, EventKind.GATE_PASS, rid, {"gate": nxt, "point": point}))
                if prog.gates_passed == len(gates):
                    prog.finish_time = t
                    events.append(RaceEvent(t, EventKind.FINISH, rid, {"time": t}))
            elif self._gates.frame_contact(prev, curr) or self._gates.out_of_bounds(curr):
                last = self._last_contact[rid]
                if last is None or t - last >= REARM_CLEAR_TIME - 1e-9:
                    prog.penalty_seconds += cfg.collision_penalty
                    prog.env_collisions += 1
                    events.append(RaceEvent(t, EventKind.ENV_COLLISION, rid, {"position": curr.copy()}))
                self._last_contact[rid] = t

        ids = list(self.progress)
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                a, b = ids[i], ids[j]
                pa, pb = self.progress[a], self.progress[b]
                if not (pa.active and pb.active):
                    continue
                d = float(np.linalg.norm(pos[a] - pos[b]))
                key = (a, b)
                if d < cfg.dq_contact_radius:
                    if not self._pair_contact.get(key):
                        self._pair_contact[key] = True
                        events.append(RaceEvent(t, EventKind.DRONE_DRONE_COLLISION, a, {"other": b}))
                        loser = self._trailing(a, b, pos)
                        self.progress[loser].disqualified = True
                        events.append(RaceEvent(t, EventKind.DISQUALIFIED, loser,
                                                {"other": a if loser == b else b}))
                else:
                    self._pair_contact[key] = False
                    if d < cfg.near_miss_radius:
                        if not self._pair_near.get(key):
                            self._pair_near[key] = True
                            events.append(RaceEvent(t, EventKind.NEAR_MISS, a, {"other": b, "distance": d}))
                    else:
                        self._pair_near[key] = False

        for rid in self.progress:
            self._prev[rid] = pos[rid]
        self.events.extend(events)
        for e in events:
            log.debug("t=%.3f %s %s %s", e.time, e.kind.value, e.racer_id, e.detail)
        return events

    def write_log_tick(self, states: dict[str, RigidState]) -> None:
        if not self.started:
            raise RaceNotStarted("race not started")
        self._write("".join(format_line(self.time, self.progress[rid], states[rid]) for rid in self.progress))

    def ranking(self) -> list[str]:
        return rank(self.progress.values(), self.config.cutoff_time)


# ---------------------------------------------------------------------------
# log parsing and replay evaluation
# ---------------------------------------------------------------------------

class MalformedLog(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class ParsedLog:
    track: str
    tier: int
    seed: int
    n_gates: int | None
    cutoff: float
    progress: dict[str, RacerProgress]
    n_lines: int
    truncated: bool = False


def parse_log(text: str) -> ParsedLog:
    """Rebuild final racer progress from a telemetry log.

    A trailing line without a newline is treated as a truncated write and
    dropped (``truncated`` is set). Any other malformed line raises
    :class:`MalformedLog` naming its 1-based line number.
    """
    lines = text.split("\n")
    truncated = False
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        lines.pop()
        truncated = True
    if not lines or not lines[0].startswith(f"# {LOG_VERSION} "):
        raise MalformedLog(1, "missing drl-log v1 header")
    head = dict(kv.split("=", 1) for kv in lines[0][len(f"# {LOG_VERSION} "):].split())
    try:
        track, tier, seed = head["track"], int(head["tier"]), int(head["seed"])
    except (KeyError, ValueError) as exc:
        raise MalformedLog(1, f"bad header field: {exc}") from exc

    n_gates, cutoff = None, math.inf
    progress: dict[str, RacerProgress] = {}
    n_data = 0
    for no, line in enumerate(lines[1:], start=2):
        if line.startswith("#"):
            try:
                meta = dict(kv.split("=", 1) for kv in line[1:].split())
                if "gates" in meta:
                    n_gates = int(meta["gates"])
                if "cutoff_s" in meta:
                    cutoff = float(meta["cutoff_s"])
            except ValueError as exc:
                raise MalformedLog(no, f"bad metadata: {exc}") from exc
            continue
        parts = line.split()
        if len(parts) != 12:
            raise MalformedLog(no, f"expected 12 fields, found {len(parts)}")
        try:
            t = float(parts[0])
            rid = parts[1]
            [float(x) for x in parts[2:8]]
            gates, last = int(parts[8]), int(parts[9])
            penalty, dq = float(parts[10]), int(parts[11])
        except ValueError as exc:
            raise MalformedLog(no, str(exc)) from exc
        if dq not in (0, 1) or gates < 0 or not math.isfinite(t):
            raise MalformedLog(no, "field out of range")
        p = progress.setdefault(rid, RacerProgress(rid))
        if gates > p.gates_passed:
            p.gate_split_times.extend([t] * (gates - p.gates_passed))
        p.gates_passed = gates
        p.last_gate_passed = None if last < 0 else last
        p.penalty_seconds = penalty
        p.disqualified = bool(dq)
        if n_gates is not None and gates >= n_gates and p.finish_time is None:
            p.finish_time = t
        n_data += 1
    return ParsedLog(track, tier, seed, n_gates, cutoff, progress, n_data, truncated)


def evaluate_log(text: str) -> tuple[list[str], ParsedLog]:
    parsed = parse_log(text)
    return rank(parsed.progress.values(), parsed.cutoff), parsed
