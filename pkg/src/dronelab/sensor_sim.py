"""Synthetic camera: projection, gate-scene rasterisation, optical flow and events.

Cameras are mounted with the body convention (X forward, Y left, Z up); the
optical frame is x right, y down, z forward. Pixel ``(col, row)`` covers
``[col, col+1) x [row, row+1)`` and is sampled at its centre.

Rendering casts one ray per pixel centre through the (distorted) lens model
and intersects it with every planar primitive, keeping the nearest hit. This
is the per-pixel z-test of a scanline rasteriser without anti-aliasing, and
it lets rolling shutter use a different camera pose per image row.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .core_types import Gate, Pose, Track, quat_exp, quat_mul, quat_to_rotmat
from .seeding import rng_for

Array = np.ndarray

BACKGROUND_ID = 0
BACKDROP_ID_BASE = 1000
BACKGROUND_RGB = (70, 110, 170)
GATE_RGB = (255, 120, 0)
CHECKER_RGB = ((210, 210, 200), (50, 60, 50))
MIN_DEPTH = 1e-6


# ---------------------------------------------------------------------------
# camera model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    width: int = 320
    height: int = 240
    fx: float = 160.0
    fy: float = 160.0
    cx: float = 160.0
    cy: float = 120.0
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    rolling_shutter_line_time: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if self.rolling_shutter_line_time < 0:
            raise ValueError("rolling shutter line time must be non-negative")

    @classmethod
    def from_fov(cls, width: int = 320, height: int = 240, hfov_deg: float = 90.0, **kw) -> CameraModel:
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(width, height, f, f, width / 2.0, height / 2.0, **kw)

    @property
    def K(self) -> Array:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any((self.k1, self.k2, self.p1, self.p2))

    def scaled(self, s: float) -> CameraModel:
        return CameraModel(int(round(self.width * s)), int(round(self.height * s)), self.fx * s, self.fy * s,
                           self.cx * s, self.cy * s, self.k1, self.k2, self.p1, self.p2,
                           self.rolling_shutter_line_time)


def world_to_optical(pose: Pose, p_world: Array) -> Array:
    """Points ``(..., 3)`` to the camera optical frame."""
    b = (np.asarray(p_world, dtype=float) - pose.position) @ pose.rotation
    return np.stack([-b[..., 1], -b[..., 2], b[..., 0]], axis=-1)


def optical_to_world(pose: Pose, p_opt: Array) -> Array:
    p_opt = np.asarray(p_opt, dtype=float)
    b = np.stack([p_opt[..., 2], -p_opt[..., 0], -p_opt[..., 1]], axis=-1)
    return b @ pose.rotation.T + pose.position


def distort(camera: CameraModel, xn: Array, yn: Array) -> tuple[Array, Array]:
    r2 = xn * xn + yn * yn
    radial = 1.0 + camera.k1 * r2 + camera.k2 * r2 * r2
    xd = xn * radial + 2 * camera.p1 * xn * yn + camera.p2 * (r2 + 2 * xn * xn)
    yd = yn * radial + camera.p1 * (r2 + 2 * yn * yn) + 2 * camera.p2 * xn * yn
    return xd, yd


def undistort(camera: CameraModel, xd: Array, yd: Array, tol_px: float = 1e-8, max_iter: int = 50) -> tuple[Array, Array]:
    """Invert :func:`distort` by Newton iteration to ``tol_px`` pixels."""
    xd = np.asarray(xd, dtype=float)
    yd = np.asarray(yd, dtype=float)
    if not camera.has_distortion:
        return xd.copy(), yd.copy()
    k1, k2, p1, p2 = camera.k1, camera.k2, camera.p1, camera.p2
    x, y = xd.copy(), yd.copy()
    tol = tol_px / max(camera.fx, camera.fy)
    for _ in range(max_iter):
        fx_, fy_ = distort(camera, x, y)
        ex, ey = fx_ - xd, fy_ - yd
        if np.max(np.abs(ex), initial=0.0) < tol and np.max(np.abs(ey), initial=0.0) < tol:
            break
        r2 = x * x + y * y
        radial = 1 + k1 * r2 + k2 * r2 * r2
        drad = 2 * k1 + 4 * k2 * r2  # d(radial)/d(r2) * 2
        j11 = radial + x * drad * x + 2 * p1 * y + 6 * p2 * x
        j12 = x * drad * y + 2 * p1 * x + 2 * p2 * y
        j21 = y * drad * x + 2 * p1 * x + 2 * p2 * y
        j22 = radial + y * drad * y + 6 * p1 * y + 2 * p2 * x
        det = j11 * j22 - j12 * j21
        x = x - (j22 * ex - j12 * ey) / det
        y = y - (-j21 * ex + j11 * ey) / det
    return x, y


def project_many(camera: CameraModel, pose: Pose, points: Array) -> tuple[Array, Array, Array]:
    """Pixels ``(n, 2)``, depths ``(n,)`` and an in-front mask for world points."""
    pc = world_to_optical(pose, np.atleast_2d(points))
    z = pc[:, 2]
    front = z > MIN_DEPTH
    zs = np.where(front, z, 1.0)
    xd, yd = distort(camera, pc[:, 0] / zs, pc[:, 1] / zs)
    uv = np.column_stack([camera.fx * xd + camera.cx, camera.fy * yd + camera.cy])
    return uv, z, front


def project(camera: CameraModel, pose: Pose, p_world) -> tuple[Array, float] | None:
    """Pixel and optical depth of one point, or ``None`` behind the camera."""
    uv, z, front = project_many(camera, pose, np.asarray(p_world, dtype=float).reshape(1, 3))
    if not front[0]:
        return None
    return uv[0], float(z[0])


def back_project(camera: CameraModel, pose: Pose, uv, depth) -> Array:
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    xd = (uv[:, 0] - camera.cx) / camera.fx
    yd = (uv[:, 1] - camera.cy) / camera.fy
    xn, yn = undistort(camera, xd, yd)
    depth = np.asarray(depth, dtype=float).reshape(-1)
    return optical_to_world(pose, np.column_stack([xn * depth, yn * depth, depth]))


@functools.lru_cache(maxsize=16)
def _ray_table(camera: CameraModel) -> tuple[Array, Array]:
    """Normalised undistorted ray coordinates of every pixel centre."""
    u = np.arange(camera.width) + 0.5
    v = np.arange(camera.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    xn, yn = undistort(camera, (uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy)
    xn.setflags(write=False)
    yn.setflags(write=False)
    return xn, yn


# ---------------------------------------------------------------------------
# scene and rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Backdrop:
    """Textured rectangle (checkerboard) in the plane of ``pose``'s local Y-Z axes."""

    pose: Pose
    width: float
    height: float
    checker: float = 1.0
    seg_id: int = BACKDROP_ID_BASE


@dataclass(frozen=True)
class Scene:
    gates: tuple[Gate, ...] = ()
    backdrops: tuple[Backdrop, ...] = ()

    @classmethod
    def from_track(cls, track: Track | None, ground: bool = False, ground_z: float = 0.0,
                   ground_size: float = 400.0) -> Scene:
        gates = tuple(track.gates) if track is not None else ()
        backdrops = ()
        if ground:
            # gate-style plane whose +X normal points up
            pose = Pose.from_euler((0.0, 0.0, ground_z), 0.0, -math.pi / 2)
            backdrops = (Backdrop(pose, ground_size, ground_size, 1.0, BACKDROP_ID_BASE),)
        return cls(gates, backdrops)


@dataclass
class FrameBundle:
    rgb: Array
    depth: Array
    seg: Array
    capture_time: float
    camera_pose: Pose
    flow: Array | None = None
    flow_valid: Array | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.seg.shape


def gate_seg_id(gate: Gate) -> int:
    return gate.index + 1


def _row_poses(camera: CameraModel, pose: Pose, twist) -> tuple[Array, Array]:
    """Per-row camera origins ``(H, 3)`` and rotations ``(H, 3, 3)``."""
    H = camera.height
    if twist is None or camera.rolling_shutter_line_time == 0.0:
        return np.repeat(pose.position[None], H, axis=0), np.repeat(pose.rotation[None], H, axis=0)
    lin, ang = (np.asarray(x, dtype=float) for x in twist)
    dts = np.arange(H) * camera.rolling_shutter_line_time
    origins = pose.position[None] + dts[:, None] * lin[None]
    rots = np.array([quat_to_rotmat(quat_mul(quat_exp(ang * dt), pose.orientation)) for dt in dts])
    return origins, rots


@functools.lru_cache(maxsize=16)
def _ray_ranges(camera: CameraModel) -> tuple[Array, Array, Array, Array]:
    """Per-row ``yn`` and per-column ``xn`` extents of the ray table."""
    xn, yn = _ray_table(camera)
    return yn.min(axis=1), yn.max(axis=1), xn.min(axis=0), xn.max(axis=0)


def _window(camera: CameraModel, corners_opt: Array) -> tuple[slice, slice] | None:
    """Conservative pixel window containing a planar quad fully in front of the camera."""
    xs = corners_opt[:, 0] / corners_opt[:, 2]
    ys = corners_opt[:, 1] / corners_opt[:, 2]
    rlo, rhi, clo, chi = _ray_ranges(camera)
    rows = np.nonzero((rhi >= ys.min()) & (rlo <= ys.max()))[0]
    cols = np.nonzero((chi >= xs.min()) & (clo <= xs.max()))[0]
    if rows.size == 0 or cols.size == 0:
        return None
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def _cast(scene: Scene, camera: CameraModel, pose: Pose, twist=None, solid_ids=frozenset(), want_hits=False):
    """Nearest hit per pixel: depth, seg id, world hit point and checker parity.

    Gates whose seg id is in ``solid_ids`` are cast as their full outer
    rectangle instead of the hollow frame. The body-frame ray of a pixel is
    ``(1, -xn, -yn)``, so its optical depth equals the ray parameter.
    """
    xn_all, yn_all = _ray_table(camera)
    origins, rots = _row_poses(camera, pose, twist)
    global_shutter = twist is None or camera.rolling_shutter_line_time == 0.0
    H, W = xn_all.shape
    depth = np.full((H, W), np.inf)
    seg = np.zeros((H, W), dtype=np.uint16)
    checker = np.zeros((H, W), dtype=bool)

    prims = [(g.pose, g.outer_width / 2, g.outer_height / 2,
              0.0 if gate_seg_id(g) in solid_ids else g.inner_width / 2,
              0.0 if gate_seg_id(g) in solid_ids else g.inner_height / 2,
              gate_seg_id(g), None) for g in scene.gates]
    prims += [(b.pose, b.width / 2, b.height / 2, 0.0, 0.0, b.seg_id, b.checker) for b in scene.backdrops]
    fwd = rots[:, :, 0]
    for p_pose, ow, oh, iw, ih, sid, chk in prims:
        R = p_pose.rotation
        c = p_pose.position
        corner_pts = c + np.array([[0, sy * ow, sz * oh] for sy in (-1, 1) for sz in (-1, 1)]) @ R.T
        # cull primitives entirely behind every row's image plane
        ahead = np.einsum("rj,krj->kr", fwd, corner_pts[:, None, :] - origins[None])
        if np.all(ahead <= MIN_DEPTH):
            continue
        rs, cs = slice(0, H), slice(0, W)
        if global_shutter and np.all(ahead > MIN_DEPTH):
            win = _window(camera, world_to_optical(pose, corner_pts))
            if win is None:
                continue
            rs, cs = win
        xn, yn = xn_all[rs, cs], yn_all[rs, cs]
        Rr = rots[rs]
        # plane axes expressed in each row's body frame: (H', 3)
        n_b, y_b, z_b = (np.einsum("rji,j->ri", Rr, R[:, k]) for k in range(3))
        rel0 = origins[rs] - c
        def along(v_b):
            return v_b[:, 0:1] - xn * v_b[:, 1:2] - yn * v_b[:, 2:3]
        denom = along(n_b)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -(rel0 @ R[:, 0])[:, None] / denom
        cur = depth[rs, cs]
        ok = np.isfinite(t) & (t > MIN_DEPTH) & (t < cur)
        if not ok.any():
            continue
        ly = (rel0 @ R[:, 1])[:, None] + t * along(y_b)
        lz = (rel0 @ R[:, 2])[:, None] + t * along(z_b)
        ay, az = np.abs(ly), np.abs(lz)
        inside = (ay <= ow) & (az <= oh)
        if iw > 0 or ih > 0:
            inside &= ~((ay < iw) & (az < ih))
        m = ok & inside
        cur[m] = t[m]
        seg[rs, cs][m] = sid
        if chk is not None:
            parity = (np.floor(ly / chk) + np.floor(lz / chk)).astype(np.int64) % 2 == 0
            checker[rs, cs][m] = parity[m]
        else:
            checker[rs, cs][m] = False
    hits = None
    if want_hits:
        d_body = np.stack([np.ones_like(xn_all), -xn_all, -yn_all], axis=-1)
        D = np.einsum("rij,rcj->rci", rots, d_body)
        hits = origins[:, None, :] + np.where(np.isfinite(depth), depth, 0.0)[..., None] * D
    return depth, seg, hits, checker


def render(scene: Scene | Track, camera: CameraModel, pose: Pose, capture_time: float = 0.0,
           twist=None) -> FrameBundle:
    """RGB, optical depth and segmentation of gate frames (and backdrops).

    ``twist`` is ``(linear_velocity, angular_velocity)`` in world frame and
    only matters for rolling-shutter cameras, where row ``r`` is exposed at
    ``capture_time + r * line_time``.
    """
    if isinstance(scene, Track):
        scene = Scene.from_track(scene)
    depth, seg, _, checker = _cast(scene, camera, pose, twist)
    rgb = np.empty(seg.shape + (3,), dtype=np.uint8)
    rgb[:] = BACKGROUND_RGB
    gate_px = (seg != BACKGROUND_ID) & (seg < BACKDROP_ID_BASE)
    rgb[gate_px] = GATE_RGB
    back_px = seg >= BACKDROP_ID_BASE
    rgb[back_px & checker] = CHECKER_RGB[0]
    rgb[back_px & ~checker] = CHECKER_RGB[1]
    return FrameBundle(rgb, depth, seg, capture_time, pose)


def silhouette_seg(scene: Scene | Track, camera: CameraModel, pose: Pose, solid_gate: int) -> Array:
    """Segmentation with gate ``solid_gate`` (index) filled in, others hollow."""
    if isinstance(scene, Track):
        scene = Scene.from_track(scene)
    _, seg, _, _ = _cast(scene, camera, pose, solid_ids=frozenset({solid_gate + 1}))
    return seg


def optical_flow(scene: Scene | Track, camera: CameraModel, pose_t0: Pose, pose_t1: Pose) -> tuple[Array, Array]:
    """Ground-truth flow at t1 (pixels per frame) and its validity mask.

    Each surface pixel of the t1 frame is back-projected through its depth,
    re-projected into the t0 camera, and the flow is ``pixel_t1 - pixel_t0``.
    """
    if isinstance(scene, Track):
        scene = Scene.from_track(scene)
    depth, seg, hits, _ = _cast(scene, camera, pose_t1, want_hits=True)
    valid = seg != BACKGROUND_ID
    H, W = seg.shape
    flow = np.zeros((H, W, 2))
    if valid.any():
        uv0, _, front = project_many(camera, pose_t0, hits[valid])
        vv, uu = np.nonzero(valid)
        uv1 = np.column_stack([uu + 0.5, vv + 0.5])
        f = uv1 - uv0
        ok = front & np.all(np.isfinite(f), axis=1)
        f[~ok] = 0.0
        flow[valid] = f
        vmask = valid.copy()
        vmask[vv[~ok], uu[~ok]] = False
        valid = vmask
    return flow, valid


def render_with_flow(scene, camera: CameraModel, pose_prev: Pose, pose: Pose, capture_time: float = 0.0) -> FrameBundle:
    frame = render(scene, camera, pose, capture_time)
    frame.flow, frame.flow_valid = optical_flow(scene, camera, pose_prev, pose)
    return frame


def warp_seg_by_flow(seg_t0: Array, flow: Array, valid: Array) -> Array:
    """Pull ``seg_t0`` along the flow into the t1 grid (nearest neighbour)."""
    H, W = seg_t0.shape
    vv, uu = np.nonzero(valid)
    u0 = np.floor(uu + 0.5 - flow[vv, uu, 0]).astype(int)
    v0 = np.floor(vv + 0.5 - flow[vv, uu, 1]).astype(int)
    out = np.zeros_like(seg_t0)
    inb = (u0 >= 0) & (u0 < W) & (v0 >= 0) & (v0 < H)
    out[vv[inb], uu[inb]] = seg_t0[v0[inb], u0[inb]]
    return out


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

EVENT_DTYPE = np.dtype([("t", "f8"), ("x", "i4"), ("y", "i4"), ("polarity", "i1")])


class NonMonotonicTimestamps(ValueError):
    pass


@dataclass(frozen=True)
class EventCameraParams:
    contrast_threshold: float = 0.2
    threshold_jitter_sigma: float = 0.0
    log_eps: float = 1e-3

    def __post_init__(self):
        if self.contrast_threshold <= 0 or self.log_eps <= 0 or self.threshold_jitter_sigma < 0:
            raise ValueError("invalid event camera parameters")


def luma(rgb: Array) -> Array:
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def pixel_thresholds(shape, params: EventCameraParams, seed: int = 0) -> Array:
    C = params.contrast_threshold
    if params.threshold_jitter_sigma == 0.0:
        return np.full(shape, C)
    rng = rng_for(seed, "event_threshold")
    c = C + params.threshold_jitter_sigma * rng.standard_normal(shape)
    return np.maximum(c, 0.1 * C)


def events_from_log_intensity(times, log_frames: Array, thresholds: Array) -> Array:
    """Contrast-threshold events from a ``(n, H, W)`` log-intensity stack."""
    times = np.asarray(times, dtype=np.float64)
    if len(times) < 2:
        raise ValueError("need at least two frames")
    if np.any(np.diff(times) <= 0):
        raise NonMonotonicTimestamps("capture times must strictly increase")
    ref = log_frames[0].astype(np.float64).copy()
    chunks = []
    for k in range(1, len(times)):
        L0 = log_frames[k - 1].astype(np.float64)
        L1 = log_frames[k].astype(np.float64)
        dL = L1 - ref
        n = np.floor(np.abs(dL) / thresholds).astype(np.int64)
        ys, xs = np.nonzero(n)
        if len(ys):
            counts = n[ys, xs]
            sgn = np.sign(dL[ys, xs])
            idx = np.repeat(np.arange(len(ys)), counts)
            kk = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            level = ref[ys, xs][idx] + sgn[idx] * kk * thresholds[ys, xs][idx]
            span = (L1 - L0)[ys, xs][idx]
            frac = np.clip((level - L0[ys, xs][idx]) / span, 0.0, 1.0)
            ev = np.empty(len(idx), dtype=EVENT_DTYPE)
            ev["t"] = times[k - 1] + frac * (times[k] - times[k - 1])
            ev["x"] = xs[idx]
            ev["y"] = ys[idx]
            ev["polarity"] = sgn[idx].astype(np.int8)
            chunks.append(ev)
            ref[ys, xs] += sgn * counts * thresholds[ys, xs]
    if not chunks:
        return np.empty(0, dtype=EVENT_DTYPE)
    events = np.concatenate(chunks)
    return events[np.lexsort((events["x"], events["y"], events["t"]))]


def generate_events(frames, params: EventCameraParams = EventCameraParams(), seed: int = 0) -> Array:
    """Events between consecutive frames of a time-ordered sequence.

    Returns a structured array with fields ``t, x, y, polarity`` sorted by
    time, then row, then column.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    times = [f.capture_time for f in frames]
    L = np.stack([np.log(luma(f.rgb) + params.log_eps) for f in frames])
    return events_from_log_intensity(times, L, pixel_thresholds(L.shape[1:], params, seed))


# ---------------------------------------------------------------------------
# raster and event files
# ---------------------------------------------------------------------------

def write_ppm(path, rgb: Array) -> None:
    """Binary P6, 8-bit."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def write_pgm(path, seg: Array) -> None:
    """Binary P5 with maxval 65535 (big-endian 16-bit samples)."""
    seg = np.ascontiguousarray(seg, dtype=">u2")
    h, w = seg.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(seg.tobytes())


def write_pfm(path, data: Array) -> None:
    """PFM, little-endian float32, rows stored bottom-to-top.

    2-D arrays are written greyscale (``Pf``); ``(H, W, 2)`` flow is padded
    with a zero third channel and written as colour (``PF``).
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 2:
        data = np.concatenate([data, np.zeros(data.shape[:2] + (1,), np.float32)], axis=2)
    tag = "PF" if data.ndim == 3 else "Pf"
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{tag}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> Array:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if tag == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype).reshape(h, w, ch) if ch == 3 else \
            np.frombuffer(fh.read(), dtype=dtype).reshape(h, w)
    return data[::-1].astype(np.float32)


def read_pnm(path) -> Array:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        w, h = (int(x) for x in fh.readline().split())
        maxval = int(fh.readline())
        raw = fh.read()
    if magic == b"P6":
        return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(raw, dtype=dtype).reshape(h, w).astype(np.uint16)


def write_events_csv(path, events: Array) -> None:
    with open(path, "w") as fh:
        fh.write("t,x,y,polarity\n")
        for e in events:
            fh.write(f"{e['t']:.9f},{e['x']},{e['y']},{e['polarity']}\n")
