"""Gate image datasets with pose and scale randomisation.

A camera flies the track once on the nominal spline; frames are picked
evenly from the flight. For every frame all gates are re-drawn with a random
scale and a Gaussian position offset, the scene is rendered and the next
gate's outer corners are projected for the label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_types import Gate, Pose, RigidState, Track, gate_corners_world
from .flight_dynamics import TrackerGains, VehicleParams, run_spline_mission
from .perception_baseline import capture_schedule
from .seeding import rng_for
from .sensor_sim import CameraModel, Scene, project_many, render, write_pfm, write_pgm, write_ppm
from .spline_planner import SplineRequest
from .tracks import course_waypoints

Array = np.ndarray

SCALE_RANGE = (0.8, 1.2)
POSITION_JITTER = 0.5  # m, per axis


@dataclass(frozen=True)
class LabelRow:
    frame: int
    t: float
    camera: RigidState
    gate: Gate
    scale: float
    corners: Array  # (4, 2) outer corners TL, BL, BR, TR; NaN behind the camera

    def csv(self) -> str:
        p, q = self.camera.pose.position, self.camera.pose.orientation
        gp, gq = self.gate.pose.position, self.gate.pose.orientation
        vals = [f"{self.frame}", f"{self.t:.4f}", *(f"{v:.9g}" for v in (*p, *q)), f"{self.gate.index}",
                *(f"{v:.9g}" for v in (*gp, *gq)), f"{self.scale:.9g}",
                *(f"{v:.6f}" for v in self.corners.ravel())]
        return ",".join(vals)


LABEL_HEADER = ("frame,t,cam_x,cam_y,cam_z,cam_qw,cam_qx,cam_qy,cam_qz,gate_idx,"
                "gate_x,gate_y,gate_z,gate_qw,gate_qx,gate_qy,gate_qz,scale,"
                "u_tl,v_tl,u_bl,v_bl,u_br,v_br,u_tr,v_tr")


def jitter_gate(gate: Gate, rng: np.random.Generator) -> tuple[Gate, float]:
    """Uniform scale in ``SCALE_RANGE`` and isotropic Gaussian position offset."""
    s = float(rng.uniform(*SCALE_RANGE))
    offset = rng.normal(0.0, POSITION_JITTER, 3)
    moved = gate.with_pose(Pose(gate.pose.position + offset, gate.pose.orientation))
    return moved.scaled(s), s


def corner_pixels(camera: CameraModel, camera_pose, gate: Gate) -> Array:
    uv, _, front = project_many(camera, camera_pose, gate_corners_world(gate, use_inner=False))
    uv = np.array(uv, dtype=float)
    uv[~front] = np.nan
    return uv


def flight_frames(track: Track, n_frames: int, dt: float = 0.005, v_max: float = 10.0,
                  a_max: float = 15.0) -> list[tuple[RigidState, int]]:
    """``n_frames`` states evenly spread over one nominal flight, with their next gate."""
    start, wps = course_waypoints(track)
    g0 = track.gates[0]
    initial = RigidState.at(start, math.atan2(g0.normal[1], g0.normal[0]))
    history = run_spline_mission(initial, SplineRequest(wps, v_max, a_max), TrackerGains(), VehicleParams(), dt)
    sched = capture_schedule(history, track, 1.0 / dt)
    if not sched:
        raise ValueError("flight produced no frames")
    picks = np.linspace(0, len(sched) - 1, n_frames).round().astype(int)
    return [sched[i] for i in picks]


def generate_dataset(track: Track, n_frames: int, seed: int, out_dir, camera: CameraModel | None = None,
                     dt: float = 0.005) -> list[LabelRow]:
    """Write ``frame_NNNNN.{ppm,pgm,pfm}`` plus ``labels.csv`` into ``out_dir``."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    camera = camera or CameraModel()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (state, gi) in enumerate(flight_frames(track, n_frames, dt)):
        rng = rng_for(seed, "dataset", i)
        jittered = [jitter_gate(g, rng) for g in track.gates]
        scene = Scene(tuple(g for g, _ in jittered))
        frame = render(scene, camera, state.pose, state.timestamp)
        stem = out / f"frame_{i:05d}"
        write_ppm(stem.with_suffix(".ppm"), frame.rgb)
        write_pgm(stem.with_suffix(".pgm"), frame.seg)
        write_pfm(stem.with_suffix(".pfm"), frame.depth)
        gate, s = jittered[gi]
        rows.append(LabelRow(i, state.timestamp, state, gate, s, corner_pixels(camera, state.pose, gate)))
    with open(out / "labels.csv", "w") as fh:
        fh.write(LABEL_HEADER + "\n")
        for r in rows:
            fh.write(r.csv() + "\n")
    return rows
