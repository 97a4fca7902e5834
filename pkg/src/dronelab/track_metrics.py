"""Track complexity: curvature profile, curvature metric and gate visibility.

The metric spline is a cubic through the gate centres with chord-length
parameterisation (natural end conditions, or periodic for closed tracks).
Curvature is integrated on a 1 cm arc-length table with the trapezoid rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .core_types import Pose, Track
from .sensor_sim import CameraModel, Scene, gate_seg_id, silhouette_seg

Array = np.ndarray

ARC_STEP = 0.01  # m
MIN_SPEED = 1e-9
_SUBSTEPS = 8  # parameter samples per arc-length step when building the table


class DegenerateTangent(ValueError):
    pass


@dataclass(frozen=True)
class MetricSpline:
    """Cubic through gate centres plus its arc-length table."""

    curve: CubicSpline
    knots: Array  # chord-length parameter of each gate (and the closing point)
    closed: bool
    arc: Array = field(repr=False)  # arc length at each table entry, 1 cm apart
    params: Array = field(repr=False)  # curve parameter at each table entry

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    @property
    def gate_arcs(self) -> Array:
        """Arc length at each gate centre (gate 0 at 0)."""
        return np.interp(self.knots, self.params, self.arc)


def fit_metric_spline(points, closed: bool = False, step: float = ARC_STEP) -> MetricSpline:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(chords <= 1e-12):
        raise DegenerateTangent("consecutive gate centres coincide")
    knots = np.concatenate([[0.0], np.cumsum(chords)])
    curve = CubicSpline(knots, pts, bc_type="periodic" if closed else "natural")
    n = max(int(math.ceil(knots[-1] / step)) * _SUBSTEPS, 16) + 1
    u = np.linspace(0.0, knots[-1], n)
    speed = np.linalg.norm(curve(u, 1), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(u))])
    total = cum[-1]
    arc = np.arange(0.0, total, step)
    if total - arc[-1] > 1e-9:
        arc = np.append(arc, total)
    params = np.interp(arc, cum, u)
    return MetricSpline(curve, knots, closed, arc, params)


def metric_spline(track: Track, step: float = ARC_STEP) -> MetricSpline:
    return fit_metric_spline(track.centers, track.closed, step)


def curvature_many(spline: MetricSpline, u) -> Array:
    """Curvature at parameters ``u``; NaN where the tangent vanishes."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d1 = spline.curve(u, 1)
    d2 = spline.curve(u, 2)
    x1, y1, z1 = d1.T
    x2, y2, z2 = d2.T
    num = np.sqrt((z2 * y1 - y2 * z1) ** 2 + (x2 * z1 - z2 * x1) ** 2 + (y2 * x1 - x2 * y1) ** 2)
    den = (x1 * x1 + y1 * y1 + z1 * z1) ** 1.5
    with np.errstate(divide="ignore", invalid="ignore"):
        k = num / den
    return np.where(np.sqrt(x1 * x1 + y1 * y1 + z1 * z1) > MIN_SPEED, k, np.nan)


def curvature_at(spline: MetricSpline, u: float) -> float:
    k = float(curvature_many(spline, u)[0])
    if math.isnan(k):
        raise DegenerateTangent(f"tangent vanishes at u={u}")
    return k


def curvature_profile(spline: MetricSpline) -> tuple[Array, Array]:
    """``(arc, kappa)`` on the arc-length table; gaps are NaN."""
    return spline.arc, curvature_many(spline, spline.params)


def curvature_metric(spline: MetricSpline) -> float:
    """Area under curvature-vs-arc-length divided by track length."""
    s, k = curvature_profile(spline)
    ok = ~np.isnan(k)
    # gap samples contribute nothing; trapezoids touching a gap are dropped
    pair = ok[1:] & ok[:-1]
    area = float(np.sum((0.5 * (k[1:] + k[:-1]) * np.diff(s))[pair]))
    return area / spline.length


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------

def next_gate_at(track: Track, spline: MetricSpline, s: float) -> int | None:
    """Lowest-index gate strictly ahead of arc position ``s``."""
    arcs = spline.gate_arcs[: len(track.gates)]
    ahead = np.nonzero(arcs > s + 1e-9)[0]
    if ahead.size:
        return int(ahead[0])
    return 0 if track.closed else None


def pose_at(spline: MetricSpline, s: float) -> Pose:
    """Level camera pose on the spline at arc ``s``, yawed along the tangent."""
    u = float(np.interp(s, spline.arc, spline.params))
    p = spline.curve(u)
    v = spline.curve(u, 1)
    return Pose.from_euler(p, math.atan2(v[1], v[0]))


def gate_fraction(track: Track, camera: CameraModel, pose: Pose, gate_index: int) -> float:
    """Share of the image covered by the silhouette of gate ``gate_index``.

    The gate is treated as its full outer quad (opening included); other gates
    are hollow frames that may occlude it.
    """
    scene = Scene.from_track(track)
    seg = silhouette_seg(scene, camera, pose, gate_index)
    sid = gate_seg_id(track.gates[gate_index])
    return float(np.count_nonzero(seg == sid)) / seg.size


def gate_visibility(track: Track, camera: CameraModel, spline: MetricSpline, s: float) -> float:
    gi = next_gate_at(track, spline, s)
    if gi is None:
        return 0.0
    return gate_fraction(track, camera, pose_at(spline, s), gi)


def visibility_profile(track: Track, camera: CameraModel, spline: MetricSpline,
                       n_samples: int = 200) -> tuple[Array, Array]:
    """``(arc_norm, fraction)`` at ``n_samples`` evenly spaced arc positions."""
    arc_norm = np.linspace(0.0, 1.0, n_samples, endpoint=False)
    frac = np.array([gate_visibility(track, camera, spline, a * spline.length) for a in arc_norm])
    return arc_norm, frac


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityReport:
    track_name: str
    curvature_metric: float
    samples: Array  # (n, 2): arc_m, kappa_per_m
    visibility: Array  # (m, 2): arc_norm, visibility_frac
    track_length: float
    camera: CameraModel
    gate_arc_norm: Array = field(default_factory=lambda: np.zeros(0))

    def summary_line(self) -> str:
        return f"{self.track_name},{self.curvature_metric:.4f},{self.track_length:.3f}"


def complexity_report(track: Track, camera: CameraModel | None = None, n_visibility: int = 200,
                      visibility: bool = True) -> ComplexityReport:
    camera = camera or CameraModel.from_fov(320, 240, 90.0)
    spline = metric_spline(track)
    s, k = curvature_profile(spline)
    if visibility:
        an, fr = visibility_profile(track, camera, spline, n_visibility)
    else:
        an, fr = np.zeros(0), np.zeros(0)
    return ComplexityReport(track.name, curvature_metric(spline), np.column_stack([s, k]),
                            np.column_stack([an, fr]), spline.length, camera,
                            spline.gate_arcs[: len(track.gates)] / spline.length)


def _camera_comment(camera: CameraModel) -> str:
    hfov = math.degrees(2 * math.atan(camera.width / (2 * camera.fx)))
    return (f"# camera width={camera.width} height={camera.height} fx={camera.fx:.6g} fy={camera.fy:.6g} "
            f"cx={camera.cx:.6g} cy={camera.cy:.6g} hfov_deg={hfov:.6g}\n")


def write_report_csvs(report: ComplexityReport, out_dir, stem: str | None = None) -> dict[str, str]:
    """Write curvature, visibility and summary CSVs; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or report.track_name
    paths = {
        "curvature": out / f"{stem}_curvature.csv",
        "visibility": out / f"{stem}_visibility.csv",
        "summary": out / f"{stem}_summary.csv",
    }
    with open(paths["curvature"], "w") as fh:
        fh.write("arc_m,kappa_per_m\n")
        for a, k in report.samples:
            fh.write(f"{a:.2f},{'' if math.isnan(k) else f'{k:.9g}'}\n")
    with open(paths["visibility"], "w") as fh:
        fh.write(_camera_comment(report.camera))
        fh.write("arc_norm,visibility_frac\n")
        for a, f in report.visibility:
            fh.write(f"{a:.6f},{f:.8f}\n")
    with open(paths["summary"], "w") as fh:
        fh.write("track,curvature_metric,length_m\n")
        fh.write(report.summary_line() + "\n")
    return {k: str(v) for k, v in paths.items()}
