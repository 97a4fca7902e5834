"""Procedural demo tracks."""

from __future__ import annotations

import math

import numpy as np

from .core_types import Bounds, Gate, Pose, Track

Array = np.ndarray

DEFAULT_INNER = (2.0, 2.0)
DEFAULT_OUTER = (3.0, 3.0)


def _bounds_around(points, margin: float) -> Bounds:
    pts = np.asarray(points)
    return Bounds(pts.min(axis=0) - margin, pts.max(axis=0) + margin)


def circle_track(radius: float = 20.0, n_gates: int = 12, height: float = 5.0,
                 inner=DEFAULT_INNER, outer=DEFAULT_OUTER, name: str | None = None) -> Track:
    """Gates equally spaced on a horizontal circle, flown counterclockwise."""
    gates = []
    for k in range(n_gates):
        theta = 2 * math.pi * k / n_gates
        pos = (radius * math.cos(theta), radius * math.sin(theta), height)
        gates.append(Gate(f"gate{k}", k, Pose.from_euler(pos, theta + math.pi / 2), *inner, *outer))
    pts = [g.center for g in gates]
    bounds = Bounds(np.min(pts, axis=0) - [10, 10, height], np.max(pts, axis=0) + [10, 10, 15])
    return Track(name or f"circle_r{radius:g}", tuple(gates), bounds, closed=True)


def straight_track(length: float = 50.0, n_gates: int = 6, height: float = 5.0,
                   inner=DEFAULT_INNER, outer=DEFAULT_OUTER) -> Track:
    gates = [
        Gate(f"gate{k}", k, Pose.from_euler((length * k / (n_gates - 1), 0.0, height), 0.0), *inner, *outer)
        for k in range(n_gates)
    ]
    pts = [g.center for g in gates]
    bounds = Bounds(np.min(pts, axis=0) - [10, 10, height], np.max(pts, axis=0) + [10, 10, 15])
    return Track("straight", tuple(gates), bounds)


def helix_track(a: float = 2.0, b: float = 1.0, turns: float = 2.0, n_gates: int = 48,
                inner=(0.5, 0.5), outer=(0.7, 0.7)) -> Track:
    """Gates on ``(a cos t, a sin t, b t)``, gate normal along the helix tangent."""
    gates = []
    for k in range(n_gates):
        t = 2 * math.pi * turns * k / (n_gates - 1)
        pos = (a * math.cos(t), a * math.sin(t), b * t + 1.0)
        tangent = np.array([-a * math.sin(t), a * math.cos(t), b])
        yaw = math.atan2(tangent[1], tangent[0])
        pitch = -math.atan2(tangent[2], math.hypot(tangent[0], tangent[1]))
        gates.append(Gate(f"gate{k}", k, Pose.from_euler(pos, yaw, pitch), *inner, *outer))
    return Track("helix", tuple(gates), _bounds_around([g.center for g in gates], 5.0))


def slalom_track(n_gates: int = 10, spacing: float = 15.0, amplitude: float = 6.0,
                 height: float = 5.0, inner=DEFAULT_INNER, outer=DEFAULT_OUTER) -> Track:
    """Gates alternating left/right of the +X axis."""
    gates = []
    for k in range(n_gates):
        x = spacing * k
        y = amplitude * (1 if k % 2 else -1)
        z = height + 1.5 * math.sin(0.7 * k)
        # face along the local chord direction
        y_prev = amplitude * (1 if (k - 1) % 2 else -1)
        yaw = 0.0 if k == 0 else 0.5 * math.atan2(y - y_prev, spacing)
        gates.append(Gate(f"gate{k}", k, Pose.from_euler((x, y, z), yaw), *inner, *outer))
    pts = [g.center for g in gates]
    bounds = Bounds(np.min(pts, axis=0) - [10, 10, height], np.max(pts, axis=0) + [10, 10, 15])
    return Track("slalom", tuple(gates), bounds)


DEMO_TRACKS = {
    "circle": circle_track,
    "straight": straight_track,
    "helix": helix_track,
    "slalom": slalom_track,
}


def course_waypoints(track: Track, points=None, lead_in: float = 4.0, lead_out: float = 3.0) -> tuple[Array, Array]:
    """Start position and waypoints for flying a track in gate order.

    The start sits ``lead_in`` metres behind gate 0 along its normal and the
    route ends ``lead_out`` metres past the last gate, so every gate plane is
    crossed at speed. ``points`` overrides the gate centres (offset crossings).
    """
    pts = track.centers if points is None else np.asarray(points, dtype=float).reshape(-1, 3)
    first, last = track.gates[0], track.gates[-1]
    start = pts[0] - lead_in * first.normal
    end = pts[-1] + lead_out * last.normal
    return start, np.vstack([start, pts, end])
