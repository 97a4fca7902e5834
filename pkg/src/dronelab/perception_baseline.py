"""Gate detection baseline: colour mask, corners, homography, Kalman filter.

The pipeline sees only the RGB raster. A colour box selects gate pixels, the
largest 4-connected blob is kept, its four outer corners are taken as the
mask points extremal along the image diagonals, and a homography against a
canonical reference view gives the planar pose of the gate. Per-gate centre
estimates are smoothed with a static-state Kalman filter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core_types import Gate, Pose, RigidState, Track, gate_corners_world
from .flight_dynamics import TrackerGains, VehicleParams, run_spline_mission
from .race_orchestrator import detect_gate_pass
from .seeding import rng_for
from .sensor_sim import GATE_RGB, CameraModel, FrameBundle, optical_to_world, project_many, render, undistort
from .spline_planner import SplineRequest
from .tracks import course_waypoints

Array = np.ndarray

MIN_MASK_PIXELS = 50
DEFAULT_COLOR_LO = (230, 90, 0)
DEFAULT_COLOR_HI = (255, 150, 40)
DEFAULT_Q = 1e-4
DEFAULT_R = 0.25


class PerceptionError(ValueError):
    pass


class NoGateVisible(PerceptionError):
    pass


class DegenerateMask(PerceptionError):
    pass


class SingularConfiguration(PerceptionError):
    pass


class NonSPDCovariance(PerceptionError):
    pass


# ---------------------------------------------------------------------------
# mask and corners
# ---------------------------------------------------------------------------

def extract_gate_mask(frame: FrameBundle | Array, color_lo=DEFAULT_COLOR_LO, color_hi=DEFAULT_COLOR_HI) -> Array:
    """Largest 4-connected blob of pixels inside the RGB box ``[lo, hi]``."""
    rgb = frame.rgb if isinstance(frame, FrameBundle) else np.asarray(frame)
    lo = np.asarray(color_lo)
    hi = np.asarray(color_hi)
    inside = np.all((rgb >= lo) & (rgb <= hi), axis=-1)
    labels, n = ndimage.label(inside)
    if n == 0:
        raise NoGateVisible("no pixel matches the gate colour")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _collinear(pts: Array, tol: float) -> bool:
    for i in range(4):
        a, b, c = (pts[j] for j in range(4) if j != i)
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area < tol:
            return True
    return False


def order_corners(pts: Array) -> Array:
    """Sort four image points to top-left, bottom-left, bottom-right, top-right.

    The top-left corner is the one extremal along the image's top-left
    diagonal (smallest ``u + v``); the rest follow by decreasing angle about
    the centroid, which with image y pointing down walks TL, BL, BR, TR.
    Exact for any quadrilateral rolled less than 45 degrees.
    """
    pts = np.asarray(pts, dtype=float)
    d = pts - pts.mean(axis=0)
    ang = np.arctan2(d[:, 1], d[:, 0])
    start = int(np.argmin(pts[:, 0] + pts[:, 1]))
    rel = np.mod(ang[start] - ang, 2 * np.pi)
    rel[start] = 0.0
    return pts[np.argsort(rel, kind="stable")]


def extract_corners(mask: Array) -> Array:
    """Outer corners of a gate mask as ``(4, 2)`` pixel coordinates.

    Each corner is the pixel-boundary vertex extremal along one image
    diagonal; ties along a flat extremal edge are averaged.
    """
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size < MIN_MASK_PIXELS:
        raise DegenerateMask(f"mask has {rows.size} pixels, need {MIN_MASK_PIXELS}")
    r = rows.astype(float)
    c = cols.astype(float)
    # candidate vertex per pixel for each direction: TL, BL, BR, TR
    cand = [
        (np.column_stack([c, r]), lambda p: -(p[:, 0] + p[:, 1])),
        (np.column_stack([c, r + 1]), lambda p: p[:, 1] - p[:, 0]),
        (np.column_stack([c + 1, r + 1]), lambda p: p[:, 0] + p[:, 1]),
        (np.column_stack([c + 1, r]), lambda p: p[:, 0] - p[:, 1]),
    ]
    pts = []
    for p, score in cand:
        s = score(p)
        best = s >= s.max() - 1e-9
        pts.append(p[best].mean(axis=0))
    pts = np.array(pts)
    if _collinear(pts, tol=1.0):
        raise DegenerateMask("extremal corners are collinear")
    return order_corners(pts)


# ---------------------------------------------------------------------------
# homography and planar pose
# ---------------------------------------------------------------------------

def _normalizer(pts: Array) -> Array:
    c = pts.mean(axis=0)
    mean_d = np.mean(np.linalg.norm(pts - c, axis=1))
    if mean_d <= 0:
        raise SingularConfiguration("points coincide")
    s = math.sqrt(2.0) / mean_d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def dlt_homography(src: Array, dst: Array) -> Array:
    """Homography with ``dst ~ H @ src`` from >= 4 point pairs (normalised DLT)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.shape[0] < 4:
        raise SingularConfiguration("need at least four matching points")
    scale = max(np.ptp(src, axis=0).max(), np.ptp(dst, axis=0).max(), 1e-300)
    if _collinear(src[:4], 1e-9 * scale**2) or _collinear(dst[:4], 1e-9 * scale**2):
        raise SingularConfiguration("three correspondences are collinear")
    Ts, Td = _normalizer(src), _normalizer(dst)
    s = np.column_stack([src, np.ones(len(src))]) @ Ts.T
    d = np.column_stack([dst, np.ones(len(dst))]) @ Td.T
    A = np.zeros((2 * len(src), 9))
    for i, (p, q) in enumerate(zip(s, d)):
        A[2 * i, 3:6] = -q[2] * p
        A[2 * i, 6:9] = q[1] * p
        A[2 * i + 1, 0:3] = q[2] * p
        A[2 * i + 1, 6:9] = -q[0] * p
    _, sv, vt = np.linalg.svd(A)
    if sv[7] < 1e-12 * sv[0]:
        raise SingularConfiguration("DLT system is rank deficient")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.solve(Td, Hn @ Ts)
    return H / H[2, 2] if abs(H[2, 2]) > 1e-300 else H


def apply_homography(H: Array, pts: Array) -> Array:
    pts = np.atleast_2d(pts)
    h = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    return h[:, :2] / h[:, 2:3]


@dataclass(frozen=True)
class BaselineReference:
    """Canonical frontal view of a gate at distance ``d0`` on the optical axis.

    ``corners`` are ideal (undistorted) pixel positions of the outer corners in
    top-left, bottom-left, bottom-right, top-right order.
    """

    camera: CameraModel
    corners: Array
    center_px: Array
    d0: float
    outer_width: float
    outer_height: float
    inner_width: float
    inner_height: float

    @classmethod
    def from_gate_dims(cls, camera: CameraModel, outer_width: float, outer_height: float,
                       inner_width: float | None = None, inner_height: float | None = None,
                       d0: float = 5.0) -> BaselineReference:
        if d0 <= 0:
            raise ValueError("reference distance must be positive")
        hw, hh = outer_width / 2.0, outer_height / 2.0
        plane = np.array([[hw, hh], [hw, -hh], [-hw, -hh], [-hw, hh]])
        corners = apply_homography(_plane_to_reference(camera, d0), plane)
        return cls(camera, corners, np.array([camera.cx, camera.cy]), float(d0), outer_width, outer_height,
                   inner_width if inner_width is not None else outer_width,
                   inner_height if inner_height is not None else outer_height)

    @classmethod
    def for_gate(cls, camera: CameraModel, gate: Gate, d0: float = 5.0) -> BaselineReference:
        return cls.from_gate_dims(camera, gate.outer_width, gate.outer_height, gate.inner_width,
                                  gate.inner_height, d0)

    @property
    def plane_to_image(self) -> Array:
        return _plane_to_reference(self.camera, self.d0)


def _plane_to_reference(camera: CameraModel, d0: float) -> Array:
    # gate-plane coords (local y, local z) -> optical (-y, -z, d0) for a gate facing away
    return camera.K @ np.array([[-1.0, 0, 0], [0, -1.0, 0], [0, 0, d0]])


def ideal_pixels(camera: CameraModel, uv: Array) -> Array:
    """Remove lens distortion from pixel coordinates."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    xn, yn = undistort(camera, (uv[:, 0] - camera.cx) / camera.fx, (uv[:, 1] - camera.cy) / camera.fy)
    return np.column_stack([camera.fx * xn + camera.cx, camera.fy * yn + camera.cy])


@dataclass(frozen=True)
class PlanarPose:
    rotation: Array  # columns: gate local y, local z, normal, in the optical frame
    translation: Array  # gate centre in the optical frame
    homography: Array


def planar_pose(corners: Array, reference: BaselineReference, camera: CameraModel | None = None) -> PlanarPose:
    """Gate plane pose in the optical frame from four observed corner pixels."""
    camera = camera or reference.camera
    obs = ideal_pixels(camera, corners)
    H = dlt_homography(reference.corners, obs)
    M = np.linalg.solve(camera.K, H @ reference.plane_to_image)
    s = 0.5 * (np.linalg.norm(M[:, 0]) + np.linalg.norm(M[:, 1]))
    if s <= 0 or not np.isfinite(s):
        raise SingularConfiguration("homography has no metric scale")
    M = M / s
    if M[2, 2] < 0:  # gate must lie in front of the camera
        M = -M
    r1, r2, t = M[:, 0], M[:, 1], M[:, 2]
    U, _, Vt = np.linalg.svd(np.column_stack([r1, r2, np.cross(r1, r2)]))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return PlanarPose(R, t, H)


def estimate_center_3d(corners: Array, reference: BaselineReference, camera: CameraModel | None,
                       camera_pose: Pose) -> Array:
    """World-frame gate centre from observed outer-corner pixels."""
    pose = planar_pose(corners, reference, camera)
    return optical_to_world(camera_pose, pose.translation)


# ---------------------------------------------------------------------------
# Kalman filter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GateCenterKF:
    state: Array
    covariance: Array
    q: float = DEFAULT_Q
    R: Array = field(default_factory=lambda: DEFAULT_R * np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "state", np.asarray(self.state, dtype=float).reshape(3))
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float).reshape(3, 3))
        R = np.asarray(self.R, dtype=float)
        object.__setattr__(self, "R", R * np.eye(3) if R.ndim == 0 else R.reshape(3, 3))

    @classmethod
    def from_prior(cls, position, sigma: float, q: float = DEFAULT_Q, r: float = DEFAULT_R) -> GateCenterKF:
        var = max(float(sigma) ** 2, 1e-12)
        return cls(position, var * np.eye(3), q, r * np.eye(3))


def _require_spd(P: Array) -> None:
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise NonSPDCovariance("covariance is not symmetric positive-definite") from None


def kf_update(kf: GateCenterKF, measurement) -> GateCenterKF:
    """Static-state predict then identity-measurement update (Joseph form)."""
    _require_spd(kf.covariance)
    z = np.asarray(measurement, dtype=float).reshape(3)
    P = kf.covariance + kf.q * np.eye(3)
    S = P + kf.R
    K = np.linalg.solve(S.T, P.T).T
    x = kf.state + K @ (z - kf.state)
    I_K = np.eye(3) - K
    P_new = I_K @ P @ I_K.T + K @ kf.R @ K.T
    P_new = 0.5 * (P_new + P_new.T)
    _require_spd(P_new)
    return GateCenterKF(x, P_new, kf.q, kf.R)


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

def projected_outer_corners(camera: CameraModel, camera_pose: Pose, gate: Gate) -> Array | None:
    """Exact outer-corner pixels of ``gate``, or ``None`` unless all are visible."""
    uv, _, front = project_many(camera, camera_pose, gate_corners_world(gate, use_inner=False))
    if not front.all():
        return None
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= camera.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= camera.height)
    return uv if inside.all() else None


def mask_touches_border(mask: Array) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


@dataclass(frozen=True)
class PerceptionRow:
    frame_t: float
    gate_idx: int
    estimate: Array
    err_norm: float
    detected: bool
    filtered_err: float = math.nan


@dataclass
class PerceptionReport:
    rows: list[PerceptionRow]
    n_frames: int
    n_skipped: int

    @property
    def errors(self) -> Array:
        return np.array([r.err_norm for r in self.rows if r.detected])

    @property
    def filtered_errors(self) -> Array:
        return np.array([r.filtered_err for r in self.rows if r.detected])

    @property
    def n_detected(self) -> int:
        return int(sum(r.detected for r in self.rows))

    @property
    def mean(self) -> float:
        e = self.errors
        return float(e.mean()) if e.size else math.nan

    @property
    def median(self) -> float:
        e = self.errors
        return float(np.median(e)) if e.size else math.nan

    @property
    def ci95(self) -> float:
        """Half-width of the normal-approximation 95% interval of the mean."""
        e = self.errors
        return float(1.96 * e.std(ddof=1) / math.sqrt(e.size)) if e.size > 1 else math.nan

    def per_gate(self) -> dict[int, tuple[int, float]]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            if r.detected:
                out.setdefault(r.gate_idx, []).append(r.err_norm)
        return {k: (len(v), float(np.mean(v))) for k, v in sorted(out.items())}

    def summary(self) -> dict:
        return {"mean": self.mean, "median": self.median, "n_detected": self.n_detected,
                "n_frames": self.n_frames}


def write_perception_csv(report: PerceptionReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("frame_t,gate_idx,ex,ey,ez,err_norm,detected\n")
        for r in report.rows:
            ex, ey, ez = r.estimate
            fh.write(f"{r.frame_t:.4f},{r.gate_idx},{ex:.6f},{ey:.6f},{ez:.6f},{r.err_norm:.6f},{int(r.detected)}\n")


def format_summary(report: PerceptionReport) -> str:
    return json.dumps(report.summary(), sort_keys=True)


def capture_schedule(history: list[RigidState], track: Track, rate_hz: float) -> list[tuple[RigidState, int]]:
    """States sampled at ``rate_hz`` paired with the next unpassed gate index."""
    if rate_hz <= 0:
        raise ValueError("capture rate must be positive")
    t0 = history[0].timestamp
    period = 1.0 / rate_hz
    out = [(history[0], 0)]
    next_gate = 0
    k_next = 1
    for prev, cur in zip(history, history[1:]):
        if next_gate < len(track.gates):
            passed, _ = detect_gate_pass(prev.position, cur.position, track.gates[next_gate])
            if passed:
                next_gate += 1
        if next_gate >= len(track.gates):
            break
        if cur.timestamp - t0 >= k_next * period - 1e-9:
            out.append((cur, next_gate))
            k_next += 1
    return out


def evaluate_perception(track: Track, camera: CameraModel | None = None, n_measurements: int = 1000,
                        seed: int = 0, corner_noise_px: float = 0.0, rate_hz: float = 30.0,
                        exact_corners: bool = False, v_max: float = 10.0, a_max: float = 15.0,
                        dt: float = 0.005, q: float = DEFAULT_Q, r: float = DEFAULT_R,
                        d0: float = 5.0) -> PerceptionReport:
    """Fly the track through its gate centres and score the detector on the next gate.

    Frames where nothing is detected (next gate not wholly in frame, no gate
    colour, mask clipped by the image border, degenerate corners) are skipped
    and counted. With
    ``exact_corners`` the projected outer corners replace the image pipeline.
    """
    camera = camera or CameraModel()
    start, wps = course_waypoints(track)
    first = track.gates[0]
    initial = RigidState.at(start, math.atan2(first.normal[1], first.normal[0]))
    history = run_spline_mission(initial, SplineRequest(wps, v_max, a_max), TrackerGains(), VehicleParams(), dt)
    rng = rng_for(seed, "corner_noise")
    refs: dict[tuple, BaselineReference] = {}
    rows: list[PerceptionRow] = []
    skipped = 0
    n_frames = 0
    kf: GateCenterKF | None = None
    kf_gate = -1
    for state, gi in capture_schedule(history, track, rate_hz):
        if len(rows) >= n_measurements:
            break
        n_frames += 1
        gate = track.gates[gi]
        cam_pose = state.pose
        # the next gate must be wholly in frame, otherwise the blob found is a later gate
        corners = projected_outer_corners(camera, cam_pose, gate)
        if corners is not None and not exact_corners:
            frame = render(track, camera, cam_pose, state.timestamp)
            try:
                mask = extract_gate_mask(frame)
                corners = None if mask_touches_border(mask) else extract_corners(mask)
            except PerceptionError:
                corners = None
        if corners is None:
            skipped += 1
            continue
        if corner_noise_px > 0:
            corners = corners + rng.normal(0.0, corner_noise_px, corners.shape)
        key = (gate.outer_width, gate.outer_height)
        if key not in refs:
            refs[key] = BaselineReference.for_gate(camera, gate, d0)
        try:
            est = estimate_center_3d(corners, refs[key], camera, cam_pose)
        except SingularConfiguration:
            skipped += 1
            continue
        if gi != kf_gate:
            kf = GateCenterKF(est, r * np.eye(3), q, r * np.eye(3))
            kf_gate = gi
        else:
            kf = kf_update(kf, est)
        err = float(np.linalg.norm(est - gate.center))
        rows.append(PerceptionRow(state.timestamp, gi, est, err, True,
                                  float(np.linalg.norm(kf.state - gate.center))))
    return PerceptionReport(rows, n_frames, skipped)
