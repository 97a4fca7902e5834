"""Geometric primitives, gates and tracks.

World frame is right-handed with Z up and gravity along -Z. A gate's local
+X axis is its pass-through normal, local +Y points left and +Z up when
looking along +X. Quaternions are scalar-first ``(w, x, y, z)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

Array = np.ndarray

GRAVITY = np.array([0.0, 0.0, -9.81])


class TrackFormatError(ValueError):
    """Raised when a track document is malformed."""


def vec3(x, y=None, z=None) -> Array:
    if y is None:
        v = np.asarray(x, dtype=np.float64).reshape(3)
    else:
        v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector {v}")
    return v


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q: Array) -> Array:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    q = q / n
    # canonical hemisphere keeps comparisons deterministic
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(q1: Array, q2: Array) -> Array:
    """Hamilton product ``q1 * q2``."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q: Array) -> Array:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rotmat(q: Array) -> Array:
    """Rotation matrix mapping body coordinates to world coordinates."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R: Array) -> Array:
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_rotate(q: Array, v: Array) -> Array:
    return quat_to_rotmat(q) @ np.asarray(v, dtype=np.float64)


def quat_from_euler(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> Array:
    """Z-Y-X intrinsic rotation (yaw about Z, then pitch about Y, then roll about X)."""
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    return quat_normalize(np.array([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ]))


def quat_to_euler(q: Array) -> tuple[float, float, float]:
    """Inverse of :func:`quat_from_euler`, returns ``(yaw, pitch, roll)``."""
    w, x, y, z = q
    roll = math.atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = math.asin(max(-1.0, min(1.0, 2 * (w * y - z * x))))
    yaw = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return yaw, pitch, roll


def quat_from_axis_angle(axis: Array, angle: float) -> Array:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-15 or angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    s = math.sin(angle / 2)
    return np.array([math.cos(angle / 2), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_exp(rotvec: Array) -> Array:
    rotvec = np.asarray(rotvec, dtype=np.float64)
    return quat_from_axis_angle(rotvec, float(np.linalg.norm(rotvec)))


def quat_log(q: Array) -> Array:
    """Rotation vector of a unit quaternion (shortest arc)."""
    q = q if q[0] >= 0 else -q
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-15:
        return 2.0 * v
    return 2.0 * math.atan2(s, q[0]) * v / s


def quat_slerp(q0: Array, q1: Array, alpha: float) -> Array:
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if d > 0.9995:
        return quat_normalize(q0 + alpha * (q1 - q0))
    theta = math.acos(d)
    s = math.sin(theta)
    return quat_normalize((math.sin((1 - alpha) * theta) * q0 + math.sin(alpha * theta) * q1) / s)


# ---------------------------------------------------------------------------
# poses, states, gates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    position: Array = field(default_factory=lambda: np.zeros(3))
    orientation: Array = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "position", vec3(self.position))
        object.__setattr__(self, "orientation", quat_normalize(self.orientation))

    @classmethod
    def from_euler(cls, position, yaw=0.0, pitch=0.0, roll=0.0) -> Pose:
        return cls(position, quat_from_euler(yaw, pitch, roll))

    @property
    def rotation(self) -> Array:
        return quat_to_rotmat(self.orientation)

    @property
    def yaw(self) -> float:
        return quat_to_euler(self.orientation)[0]

    def inverse_transform(self, p_world: Array) -> Array:
        return self.rotation.T @ (np.asarray(p_world, dtype=np.float64) - self.position)

    def compose(self, other: Pose) -> Pose:
        """``self * other``: ``other`` expressed in ``self``'s frame, mapped to world."""
        return Pose(transform_point(self, other.position), quat_mul(self.orientation, other.orientation))


def transform_point(pose: Pose, p_local: Array) -> Array:
    """Map a point from the pose's local frame to the world frame."""
    return pose.rotation @ np.asarray(p_local, dtype=np.float64) + pose.position


@dataclass(frozen=True)
class RigidState:
    pose: Pose = field(default_factory=Pose)
    velocity: Array = field(default_factory=lambda: np.zeros(3))
    angular_velocity: Array = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0
    # last applied kinematic acceleration; feeds the velocity-loop D term
    acceleration: Array = field(default_factory=lambda: np.zeros(3))

    @property
    def position(self) -> Array:
        return self.pose.position

    @classmethod
    def at(cls, position, yaw: float = 0.0, velocity=(0.0, 0.0, 0.0), timestamp: float = 0.0) -> RigidState:
        return cls(Pose.from_euler(position, yaw), vec3(velocity), np.zeros(3), timestamp)


@dataclass(frozen=True)
class Gate:
    id: str
    index: int
    pose: Pose
    inner_width: float
    inner_height: float
    outer_width: float
    outer_height: float

    def __post_init__(self):
        if self.inner_width <= 0 or self.inner_height <= 0:
            raise ValueError(f"gate {self.id}: inner dimensions must be positive")
        if self.outer_width < self.inner_width or self.outer_height < self.inner_height:
            raise ValueError(f"gate {self.id}: outer dimensions smaller than inner")
        if self.index < 0:
            raise ValueError(f"gate {self.id}: negative index")

    @property
    def center(self) -> Array:
        return self.pose.position

    @property
    def normal(self) -> Array:
        return self.pose.rotation[:, 0]

    def with_pose(self, pose: Pose) -> Gate:
        return replace(self, pose=pose)

    def scaled(self, s: float) -> Gate:
        return replace(self, inner_width=self.inner_width * s, inner_height=self.inner_height * s,
                       outer_width=self.outer_width * s, outer_height=self.outer_height * s)


def rect_corners_local(width: float, height: float) -> Array:
    """Rectangle corners in the gate plane: top-left, bottom-left, bottom-right, top-right.

    Counterclockwise as seen by a viewer on the -X side looking along +X.
    """
    hw, hh = width / 2.0, height / 2.0
    return np.array([[0.0, hw, hh], [0.0, hw, -hh], [0.0, -hw, -hh], [0.0, -hw, hh]])


def gate_corners_world(gate: Gate, use_inner: bool = True) -> Array:
    if use_inner:
        local = rect_corners_local(gate.inner_width, gate.inner_height)
    else:
        local = rect_corners_local(gate.outer_width, gate.outer_height)
    return local @ gate.pose.rotation.T + gate.pose.position


@dataclass(frozen=True)
class Bounds:
    min: Array
    max: Array

    def __post_init__(self):
        object.__setattr__(self, "min", vec3(self.min))
        object.__setattr__(self, "max", vec3(self.max))
        if np.any(self.max <= self.min):
            raise ValueError("world bounds must have positive extent")

    def contains(self, p: Array) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.min) and np.all(p <= self.max))


@dataclass(frozen=True)
class Track:
    name: str
    gates: tuple[Gate, ...]
    world_bounds: Bounds
    # the route loops back from the last gate to gate 0 (lap track)
    closed: bool = False

    def __post_init__(self):
        gates = tuple(sorted(self.gates, key=lambda g: g.index))
        object.__setattr__(self, "gates", gates)
        if len(gates) < 2:
            raise ValueError("a track needs at least 2 gates")
        if [g.index for g in gates] != list(range(len(gates))):
            raise ValueError("gate indices must be 0..N-1 without duplicates")
        for g in gates:
            if not self.world_bounds.contains(g.center):
                raise ValueError(f"gate {g.id} lies outside world bounds")

    @property
    def centers(self) -> Array:
        return np.array([g.center for g in self.gates])

    def with_gate_poses(self, poses) -> Track:
        gates = tuple(g.with_pose(p) for g, p in zip(self.gates, poses))
        # noisy poses may leave the box; grow it rather than reject
        lo = np.minimum(self.world_bounds.min, np.min([p.position for p in poses], axis=0) - 1.0)
        hi = np.maximum(self.world_bounds.max, np.max([p.position for p in poses], axis=0) + 1.0)
        return Track(self.name, gates, Bounds(lo, hi), self.closed)


# ---------------------------------------------------------------------------
# track documents
# ---------------------------------------------------------------------------

def track_from_dict(doc: dict) -> Track:
    try:
        name = str(doc["name"])
        wb = doc["world_bounds"]
        bounds = Bounds(wb["min"], wb["max"])
        gates = []
        seen = set()
        for i, g in enumerate(doc["gates"]):
            idx = int(g["index"])
            if idx in seen:
                raise TrackFormatError(f"duplicate gate index {idx}")
            seen.add(idx)
            pose = Pose.from_euler(
                g["position"],
                math.radians(float(g.get("yaw_deg", 0.0))),
                math.radians(float(g.get("pitch_deg", 0.0))),
                math.radians(float(g.get("roll_deg", 0.0))),
            )
            inner = g["inner"]
            outer = g.get("outer", inner)
            gates.append(Gate(str(g.get("id", f"gate{idx}")), idx, pose,
                              float(inner[0]), float(inner[1]), float(outer[0]), float(outer[1])))
        closed = doc.get("closed", False)
        if not isinstance(closed, bool):
            raise TrackFormatError("closed must be true or false")
        return Track(name, tuple(gates), bounds, closed)
    except TrackFormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise TrackFormatError(f"invalid track document: {exc}") from exc


def track_to_dict(track: Track) -> dict:
    gates = []
    for g in track.gates:
        yaw, pitch, roll = quat_to_euler(g.pose.orientation)
        gates.append({
            "id": g.id,
            "index": g.index,
            "position": [round(float(c), 9) for c in g.center],
            "yaw_deg": round(math.degrees(yaw), 9),
            "pitch_deg": round(math.degrees(pitch), 9),
            "roll_deg": round(math.degrees(roll), 9),
            "inner": [g.inner_width, g.inner_height],
            "outer": [g.outer_width, g.outer_height],
        })
    return {
        "name": track.name,
        "world_bounds": {"min": track.world_bounds.min.tolist(), "max": track.world_bounds.max.tolist()},
        "closed": track.closed,
        "gates": gates,
    }


def load_track(path) -> Track:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TrackFormatError(f"{path}: {exc}") from exc
    return track_from_dict(doc)


def save_track(track: Track, path) -> None:
    Path(path).write_text(json.dumps(track_to_dict(track), indent=2) + "\n")
