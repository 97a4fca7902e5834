"""Acceptance criteria, one test each.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line with the
measured quantity, its tolerance and the runtime against its budget, then
asserts both. Oracles are computed here, independently of the code under test.
"""

from __future__ import annotations

import contextlib
import filecmp
import io
import math
import time

import numpy as np
import pytest
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from dronelab.baseline_opponents import GameParams, ibr_plan
from dronelab.cli import main as cli_main
from dronelab.core_types import Bounds, Gate, Pose, RigidState, Track, save_track
from dronelab.environment_geometry import VoxelGrid, build_sdf, query_gradient, query_sdf
from dronelab.flight_dynamics import TrackerGains, VehicleParams, fly_spline
from dronelab.perception_baseline import BaselineReference, GateCenterKF, estimate_center_3d, kf_update
from dronelab.race_orchestrator import (
    EventKind,
    RaceConfig,
    RacerDescriptor,
    RacerProgress,
    Race,
    detect_gate_pass,
    rank,
)
from dronelab.sensor_sim import (
    Backdrop,
    CameraModel,
    FrameBundle,
    Scene,
    generate_events,
    optical_flow,
    project_many,
    render,
    warp_seg_by_flow,
)
from dronelab.spline_planner import SplineRequest, plan_min_jerk, sample_many
from dronelab.track_metrics import curvature_metric, gate_fraction, metric_spline
from dronelab.tracks import circle_track, course_waypoints, straight_track
from dronelab.core_types import gate_corners_world


def report(capsys, n: int, ok: bool, detail: str, runtime: float, budget: float) -> None:
    status = "PASS" if ok and runtime < budget else "FAIL"
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:2d} {status} {detail} runtime={runtime:.2f}s (limit {budget:g}s)")


# ---------------------------------------------------------------------------
# 1. curvature metric
# ---------------------------------------------------------------------------

def test_acceptance_01_curvature_metric(capsys):
    t0 = time.perf_counter()
    circle = curvature_metric(metric_spline(circle_track(radius=20.0)))
    straight = curvature_metric(metric_spline(straight_track()))
    runtime = time.perf_counter() - t0
    rel = abs(circle - 1 / 20.0) / (1 / 20.0)
    ok = rel <= 0.02 and straight == 0.0
    report(capsys, 1, ok, f"circle={circle:.6f} (1/R=0.05, rel err {rel:.2%} <= 2%) straight={straight!r} (== 0)",
           runtime, 1.0)
    assert rel <= 0.02
    assert straight == 0.0
    assert runtime < 1.0


# ---------------------------------------------------------------------------
# 2. minimum-jerk planner
# ---------------------------------------------------------------------------

def test_acceptance_02_min_jerk(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)

    # single rest-to-rest segment against 10 s^3 - 15 s^4 + 6 s^5
    p0, p1 = np.array([1.0, -2.0, 3.0]), np.array([4.0, 2.0, 5.5])
    sp = plan_min_jerk(SplineRequest(np.array([p0, p1]), 30.0, 15.0))
    T = float(sp.durations[0])
    d = p1 - p0
    expected = np.zeros((3, 6))
    expected[:, 0] = p0
    expected[:, 3] = 10 * d / T ** 3
    expected[:, 4] = -15 * d / T ** 4
    expected[:, 5] = 6 * d / T ** 5
    nz = expected != 0
    coeff_rel = float(np.max(np.abs(sp.coeffs[0][nz] - expected[nz]) / np.abs(expected[nz])))
    coeff_zero = float(np.max(np.abs(sp.coeffs[0][~nz])))

    worst_c2 = 0.0
    worst_v = worst_a = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 9))
        wps = np.cumsum(rng.uniform(-8, 8, (n, 3)), axis=0)
        sp = plan_min_jerk(SplineRequest(wps, 30.0, 15.0))
        kt = sp.knot_times[1:-1]
        for k, tk in enumerate(kt):
            left = [sample_many_piece(sp, k, sp.durations[k], d) for d in range(3)]
            right = [sample_many_piece(sp, k + 1, 0.0, d) for d in range(3)]
            worst_c2 = max(worst_c2, max(float(np.max(np.abs(a - b))) for a, b in zip(left, right)))
        ts = np.linspace(0.0, sp.total_duration, max(2, int(sp.total_duration * 2000)))
        _, v, a, _ = sample_many(sp, ts)
        worst_v = max(worst_v, float(np.max(np.linalg.norm(v, axis=1))) / 30.0)
        worst_a = max(worst_a, float(np.max(np.linalg.norm(a, axis=1))) / 15.0)
    runtime = time.perf_counter() - t0
    ok = coeff_rel <= 1e-9 and coeff_zero <= 1e-9 and worst_c2 < 1e-6 and worst_v <= 1.05 and worst_a <= 1.05
    report(capsys, 2, ok, f"coeff rel err={coeff_rel:.1e} (<=1e-9) C2 jump={worst_c2:.1e} (<1e-6) "
           f"peak v/vmax={worst_v:.3f} a/amax={worst_a:.3f} (<=1.05)", runtime, 5.0)
    assert coeff_rel <= 1e-9 and coeff_zero <= 1e-9
    assert worst_c2 < 1e-6
    assert worst_v <= 1.05 and worst_a <= 1.05
    assert runtime < 5.0


def sample_many_piece(sp, seg: int, tau: float, d: int) -> np.ndarray:
    """Derivative ``d`` of segment ``seg`` evaluated from its raw coefficients."""
    c = sp.coeffs[seg]
    k = np.arange(c.shape[1])
    fac = np.array([math.perm(int(i), d) if i >= d else 0 for i in k], dtype=float)
    powers = np.array([tau ** (i - d) if i >= d else 0.0 for i in k])
    return c @ (fac * powers)


# ---------------------------------------------------------------------------
# 3. closed-loop tracking
# ---------------------------------------------------------------------------

def test_acceptance_03_tracking(capsys):
    t0 = time.perf_counter()
    track = circle_track(radius=20.0)
    start, wps = course_waypoints(track)
    g0 = track.gates[0]
    spline = plan_min_jerk(SplineRequest(wps, 10.0, 15.0))
    initial = RigidState.at(start, math.atan2(g0.normal[1], g0.normal[0]))
    hist = fly_spline(initial, spline, TrackerGains(), VehicleParams(), dt=0.005)
    pos = np.array([s.position for s in hist])

    # cross-track: horizontal distance to the reference path (1 mm samples), while the reference runs
    ref, _, _, _ = sample_many(spline, np.linspace(0, spline.total_duration,
                                                   int(spline.total_duration * 10000) + 1))
    flying = np.array([s.timestamp for s in hist]) <= spline.total_duration
    dist, _ = cKDTree(ref[:, :2]).query(pos[flying, :2])
    rms = float(np.sqrt(np.mean(dist ** 2)))

    nxt = 0
    for a, b in zip(pos, pos[1:]):
        if nxt < len(track.gates) and detect_gate_pass(a, b, track.gates[nxt])[0]:
            nxt += 1
    runtime = time.perf_counter() - t0
    ok = rms < 0.3 and nxt == 12
    report(capsys, 3, ok, f"RMS cross-track={rms:.4f} m (<0.3) gates passed={nxt}/12", runtime, 10.0)
    assert rms < 0.3
    assert nxt == 12
    assert runtime < 10.0


# ---------------------------------------------------------------------------
# 4. homography exact recovery
# ---------------------------------------------------------------------------

def _random_view(rng, camera: CameraModel, distance_range=(3.0, 15.0)):
    """A camera pose and a gate in its frustum, gate facing away from the camera."""
    cam = Pose.from_euler(rng.uniform(-5, 5, 3), rng.uniform(-math.pi, math.pi), rng.uniform(-0.2, 0.2),
                          rng.uniform(-0.2, 0.2))
    while True:
        dist = rng.uniform(*distance_range)
        # direction inside the central part of the field of view, in the optical frame
        u = rng.uniform(0.25, 0.75) * camera.width
        v = rng.uniform(0.25, 0.75) * camera.height
        ray = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
        p_opt = dist * ray / np.linalg.norm(ray)
        # optical (x right, y down, z forward) -> body (x forward, y left, z up)
        p_body = np.array([p_opt[2], -p_opt[0], -p_opt[1]])
        center = cam.rotation @ p_body + cam.position
        yaw = cam.yaw + rng.uniform(-0.6, 0.6)
        gate = Gate("g", 0, Pose.from_euler(center, yaw, rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)),
                    1.5, 1.5, 2.0, 2.0)
        uv, _, front = project_many(camera, cam, gate_corners_world(gate, use_inner=False))
        inside = np.all((uv >= 0) & (uv <= [camera.width, camera.height]))
        if front.all() and inside:
            return cam, gate, uv


def test_acceptance_04_homography_exact(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    camera = CameraModel()
    ref = BaselineReference.from_gate_dims(camera, 2.0, 2.0, 1.5, 1.5)
    worst = 0.0
    for _ in range(100):
        cam, gate, uv = _random_view(rng, camera)
        est = estimate_center_3d(uv, ref, camera, cam)
        worst = max(worst, float(np.linalg.norm(est - gate.center)))
    runtime = time.perf_counter() - t0
    ok = worst < 1e-6
    report(capsys, 4, ok, f"worst centre error={worst:.2e} m over 100 poses (<1e-6)", runtime, 5.0)
    assert worst < 1e-6
    assert runtime < 5.0


# ---------------------------------------------------------------------------
# 5. perception Monte Carlo
# ---------------------------------------------------------------------------

def test_acceptance_05_perception_monte_carlo(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    camera = CameraModel()
    ref = BaselineReference.from_gate_dims(camera, 3.0, 3.0, 2.0, 2.0)

    def view():
        cam, gate, uv = _random_view(rng, camera, (8.0, 8.0))
        gate = Gate("g", 0, gate.pose, 2.0, 2.0, 3.0, 3.0)
        uv, _, _ = project_many(camera, cam, gate_corners_world(gate, use_inner=False))
        return cam, gate, uv

    single = []
    for _ in range(500):
        cam, gate, uv = view()
        est = estimate_center_3d(uv + rng.normal(0, 1.0, uv.shape), ref, camera, cam)
        single.append(np.linalg.norm(est - gate.center))
    single_median = float(np.median(single))

    # static target: no process noise, prior taken from the first measurement
    filtered = []
    for _ in range(50):
        cam, gate, uv = view()
        meas = [estimate_center_3d(uv + rng.normal(0, 1.0, uv.shape), ref, camera, cam) for _ in range(31)]
        kf = GateCenterKF(meas[0], 0.25 * np.eye(3), 0.0, 0.25 * np.eye(3))
        for z in meas[1:]:
            kf = kf_update(kf, z)
        filtered.append(np.linalg.norm(kf.state - gate.center))
    filtered_median = float(np.median(filtered))
    runtime = time.perf_counter() - t0
    ratio = filtered_median / single_median
    ok = single_median < 0.5 and ratio < 0.4
    report(capsys, 5, ok, f"single median={single_median:.4f} m (<0.5) filtered median after 30 updates="
           f"{filtered_median:.4f} m, ratio {ratio:.3f} (<0.4)", runtime, 30.0)
    assert single_median < 0.5
    assert ratio < 0.4
    assert runtime < 30.0


# ---------------------------------------------------------------------------
# 6. race rules
# ---------------------------------------------------------------------------

def _line_track() -> Track:
    gates = tuple(Gate(f"g{k}", k, Pose.from_euler((10.0 * k, 0.0, 5.0), 0.0), 2.0, 2.0, 3.0, 3.0)
                  for k in range(3))
    return Track("line", gates, Bounds((-20, -20, 0), (40, 20, 20)))


def _states(**positions) -> dict[str, RigidState]:
    return {rid: RigidState.at(p) for rid, p in positions.items()}


def _race(*ids, **kw) -> Race:
    track = _line_track()
    descs = tuple(RacerDescriptor(rid, RigidState.at((-2.0, 3.0 * k, 5.0))) for k, rid in enumerate(ids))
    return Race(RaceConfig(track, descs, **kw)).start()


def test_acceptance_06_race_rules(capsys):
    t0 = time.perf_counter()
    checks = {}

    # ordered gates: flying gate 1 first does not count, gate 0 then gate 1 does
    race = _race("a")
    race._prev["a"] = np.array([9.5, 0, 5.0])
    race.tick(_states(a=(10.5, 0, 5)))
    checks["skip gate ignored"] = race.progress["a"].gates_passed == 0
    race._prev["a"] = np.array([-0.5, 0, 5.0])
    race.tick(_states(a=(0.5, 0, 5)))
    race._prev["a"] = np.array([9.5, 0, 5.0])
    race.tick(_states(a=(10.5, 0, 5)))
    checks["in-order gates counted"] = race.progress["a"].gates_passed == 2

    # reverse crossing
    race = _race("a")
    race._prev["a"] = np.array([0.5, 0, 5.0])
    race.tick(_states(a=(-0.5, 0, 5)))
    checks["reverse crossing rejected"] = race.progress["a"].gates_passed == 0

    # debounced penalties: continuous frame contact counts once, re-arms after 0.5 s clear
    race = _race("a", dt=0.01, collision_penalty=10.0)
    on_frame = (0.0, 1.25, 5.0)  # inside the frame band of gate 0
    for _ in range(30):
        race.tick(_states(a=on_frame))
    one = race.progress["a"].penalty_seconds
    for _ in range(20):
        race.tick(_states(a=(-3.0, 1.25, 5.0)))
    race._prev["a"] = np.array([-3.0, 1.25, 5.0])
    race.tick(_states(a=on_frame))
    early = race.progress["a"].penalty_seconds
    for _ in range(60):
        race.tick(_states(a=(-3.0, 1.25, 5.0)))
    race._prev["a"] = np.array([-3.0, 1.25, 5.0])
    race.tick(_states(a=on_frame))
    checks["penalty debounced"] = (one, early, race.progress["a"].penalty_seconds) == (10.0, 10.0, 20.0)

    # trailing drone is disqualified on contact
    race = _race("a", "b")
    race._prev["a"] = np.array([-0.5, 0, 5.0])
    race._prev["b"] = np.array([-1.5, 0, 5.0])
    ev = race.tick(_states(a=(0.5, 0, 5), b=(0.4, 0, 5)))
    kinds = [e.kind for e in ev]
    checks["trailing DQ"] = (race.progress["b"].disqualified and not race.progress["a"].disqualified
                             and EventKind.DISQUALIFIED in kinds)

    # ranking: gates first, then time plus penalties, DQ last
    ps = [RacerProgress("x", 3, 2, [1, 2, 3], 0.0, False, 30.0),
          RacerProgress("y", 3, 2, [1, 2, 3], 10.0, False, 25.0),
          RacerProgress("z", 2, 1, [1, 2], 0.0, False, None),
          RacerProgress("w", 3, 2, [1, 2, 3], 0.0, True, 10.0)]
    checks["ranking"] = rank(ps, 300.0) == ["x", "y", "z", "w"]
    runtime = time.perf_counter() - t0
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report(capsys, 6, ok, f"{sum(checks.values())}/{len(checks)} rule checks exact"
           + (f" failed={failed}" if failed else ""), runtime, 1.0)
    assert ok, failed
    assert runtime < 1.0


# ---------------------------------------------------------------------------
# 7. log round trip
# ---------------------------------------------------------------------------

def _cli(args) -> tuple[int, str]:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        rc = cli_main([str(a) for a in args])
    return rc, buf.getvalue()


def test_acceptance_07_log_round_trip(capsys, tmp_path):
    track_path = tmp_path / "short.json"
    save_track(straight_track(length=12.0, n_gates=2), track_path)
    opponents = ("none", "random_spline", "game_theoretic")
    t0 = time.perf_counter()
    mismatched, nonidentical, failures = [], [], []
    for seed in range(20):
        tier = (1, 1, 3, 2)[seed % 4]
        flags = ["--track", track_path, "--tier", tier, "--opponent", opponents[seed % 3], "--seed", seed]
        logs = []
        for rep in range(2):
            log = tmp_path / f"run{rep}" / f"race{seed}.log"
            rc, race_out = _cli(["race", *flags, "--out", log])
            rc2, eval_out = _cli(["evaluate", log])
            if rc or rc2:
                failures.append((seed, rc, rc2))
            if race_out != eval_out:
                mismatched.append(seed)
            logs.append(log)
        if not filecmp.cmp(logs[0], logs[1], shallow=False):
            nonidentical.append(seed)
    runtime = time.perf_counter() - t0
    ok = not (mismatched or nonidentical or failures)
    report(capsys, 7, ok, f"20 races x2: ranking mismatches={mismatched} non-identical logs={nonidentical} "
           f"exit failures={failures}", runtime, 60.0)
    assert not failures
    assert not mismatched
    assert not nonidentical
    assert runtime < 60.0


# ---------------------------------------------------------------------------
# 8. signed distance field
# ---------------------------------------------------------------------------

def _brute_force(occ: np.ndarray, res: float) -> np.ndarray:
    """O(n * m) nearest opposite-voxel search, in chunks (integer squared distances are exact)."""
    idx = np.indices(occ.shape).reshape(3, -1).T.astype(np.float64)
    flat = occ.ravel()
    out = np.empty(len(flat))
    for mask, sign in ((flat, -1.0), (~flat, 1.0)):
        src, dst = idx[mask], idx[~mask]
        if len(dst) == 0:
            out[mask] = sign * 1e6
            continue
        best = np.empty(len(src))
        for i in range(0, len(src), 4096):
            best[i:i + 4096] = cdist(src[i:i + 4096], dst, "sqeuclidean").min(axis=1)
        out[mask] = sign * res * np.sqrt(best)
    return out.reshape(occ.shape)


def test_acceptance_08_sdf(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    mismatched = 0
    for _ in range(100):
        dims = tuple(int(v) for v in rng.integers(1, 33, 3))
        occ = rng.random(dims) < rng.uniform(0.01, 0.3)
        res = float(rng.choice([0.1, 0.25, 0.5]))
        sdf = build_sdf(VoxelGrid(np.zeros(3), res, occ))
        if not np.array_equal(sdf.distance, _brute_force(occ, res)):
            mismatched += 1

    # gradient against finite differences of the interpolated distance
    occ = np.zeros((32, 32, 32), dtype=bool)
    occ[rng.integers(0, 32, 12), rng.integers(0, 32, 12), rng.integers(0, 32, 12)] = True
    res = 0.25
    sdf = build_sdf(VoxelGrid(np.zeros(3), res, occ))
    h = 0.1 * res
    errs = []
    lo, hi = 1.5 * res, 30.5 * res  # interior: finite-difference stencils stay inside the lattice
    for p in rng.uniform(lo, hi, (1000, 3)):
        g = query_gradient(sdf, p)
        fd = np.array([(query_sdf(sdf, p + h * e) - query_sdf(sdf, p - h * e)) / (2 * h) for e in np.eye(3)])
        n = np.linalg.norm(fd)
        fd = fd / n if n > 1e-9 else fd
        errs.append(float(np.max(np.abs(g - fd))))
    errs = np.array(errs)
    runtime = time.perf_counter() - t0
    ok = mismatched == 0 and errs.max() < 1e-3
    report(capsys, 8, ok, f"EDT mismatches={mismatched}/100 (==0); gradient vs FD(h=0.1 res) max err="
           f"{errs.max():.2e} median={np.median(errs):.2e} within 1e-3: {np.mean(errs < 1e-3):.1%}",
           runtime, 60.0)
    assert mismatched == 0
    assert errs.max() < 1e-3
    assert runtime < 60.0


# ---------------------------------------------------------------------------
# 9. events
# ---------------------------------------------------------------------------

def _reference_events(frames, C: float, eps: float) -> list[tuple[float, int, int, int]]:
    """Per-pixel scalar loop: emit while the log change from the reference reaches C."""
    rgbs = [f.rgb.astype(np.float64) / 255.0 for f in frames]
    times = [f.capture_time for f in frames]
    H, W = rgbs[0].shape[:2]
    out = []
    for y in range(H):
        for x in range(W):
            logs = [math.log(0.299 * im[y, x, 0] + 0.587 * im[y, x, 1] + 0.114 * im[y, x, 2] + eps) for im in rgbs]
            ref = logs[0]
            for k in range(1, len(logs)):
                L0, L1 = logs[k - 1], logs[k]
                n = int(math.floor(abs(L1 - ref) / C))
                sgn = 1 if L1 > ref else -1
                for j in range(1, n + 1):
                    level = ref + sgn * j * C
                    frac = min(max((level - L0) / (L1 - L0), 0.0), 1.0)
                    out.append((times[k - 1] + frac * (times[k] - times[k - 1]), y, x, sgn))
                ref += sgn * n * C
    out.sort()
    return out


def test_acceptance_09_events(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    C, eps = 0.2, 1e-3
    bad = 0
    worst_dt = 0.0
    total = 0
    for _ in range(50):
        n = int(rng.integers(2, 6))
        times = np.cumsum(rng.uniform(0.001, 0.05, n))
        base = rng.integers(0, 256, (32, 32, 3))
        frames = []
        for t in times:
            img = np.clip(base + rng.integers(-80, 81, (32, 32, 3)), 0, 255).astype(np.uint8)
            frames.append(FrameBundle(img, np.zeros((32, 32)), np.zeros((32, 32), int), float(t), Pose()))
        ev = generate_events(frames)
        ref = _reference_events(frames, C, eps)
        total += len(ref)
        got = sorted(zip(ev["t"].tolist(), ev["y"].tolist(), ev["x"].tolist(), ev["polarity"].tolist()))
        if len(got) != len(ref) or any(a[1:] != b[1:] for a, b in zip(got, ref)):
            bad += 1
            continue
        if ref:
            worst_dt = max(worst_dt, max(abs(a[0] - b[0]) for a, b in zip(got, ref)))
    static_events = 0
    for _ in range(10):
        img = rng.integers(0, 256, (32, 32, 3)).astype(np.uint8)
        frames = [FrameBundle(img.copy(), np.zeros((32, 32)), np.zeros((32, 32), int), 0.01 * (k + 1), Pose())
                  for k in range(4)]
        static_events += len(generate_events(frames))
    runtime = time.perf_counter() - t0
    ok = bad == 0 and worst_dt <= 1e-9 and static_events == 0
    report(capsys, 9, ok, f"sequences differing={bad}/50 ({total} reference events) max |dt|={worst_dt:.1e} s "
           f"(<=1e-9) static events={static_events}", runtime, 30.0)
    assert bad == 0
    assert worst_dt <= 1e-9
    assert static_events == 0
    assert runtime < 30.0


# ---------------------------------------------------------------------------
# 10. optical flow
# ---------------------------------------------------------------------------

def test_acceptance_10_optical_flow(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    camera = CameraModel()
    wall = Backdrop(Pose.from_euler((12.0, 0.0, 0.0), math.pi), 60.0, 60.0, 1.0)
    scene = Scene(tuple(straight_track(length=20.0, n_gates=3, height=0.0).gates), (wall,))
    worst_share = 1.0
    for _ in range(10):
        p0 = Pose.from_euler((-6.0 + rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)),
                             rng.uniform(-0.1, 0.1))
        p1 = Pose(p0.position + rng.uniform(-0.05, 0.05, 3),
                  Pose.from_euler((0, 0, 0), p0.yaw + rng.uniform(-0.005, 0.005), rng.uniform(-0.005, 0.005)
                                  ).orientation)
        f0 = render(scene, camera, p0)
        f1 = render(scene, camera, p1)
        flow, valid = optical_flow(scene, camera, p0, p1)
        warped = warp_seg_by_flow(f0.seg, flow, valid)
        share = float(np.mean(warped[valid] == f1.seg[valid]))
        worst_share = min(worst_share, share)

    # rotational flow at the image centre: pure yaw at omega for dt
    omega, dt = 0.5, 0.02
    q0 = Pose.from_euler((0.0, 0.0, 0.0), 0.0)
    q1 = Pose.from_euler((0.0, 0.0, 0.0), omega * dt)
    flow, valid = optical_flow(Scene((), (wall,)), camera, q0, q1)
    cy, cx = camera.height // 2, camera.width // 2
    mag = float(np.linalg.norm(flow[cy, cx]))
    expect = camera.fx * omega * dt
    rel = abs(mag - expect) / expect
    runtime = time.perf_counter() - t0
    ok = worst_share >= 0.98 and rel <= 0.05 and bool(valid[cy, cx])
    report(capsys, 10, ok, f"worst warp agreement={worst_share:.4f} (>=0.98) centre flow={mag:.4f} px vs "
           f"fx*w*dt={expect:.4f} (rel {rel:.2%} <= 5%)", runtime, 10.0)
    assert worst_share >= 0.98
    assert rel <= 0.05
    assert runtime < 10.0


# ---------------------------------------------------------------------------
# 11. gate visibility
# ---------------------------------------------------------------------------

def test_acceptance_11_gate_visibility(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    cases = [(d, fov) for d in (2.5, 3.0, 3.5, 4.0) for fov in (60.0, 70.0, 80.0, 90.0, 100.0)]
    for d, fov in cases:
        camera = CameraModel.from_fov(640, 480, fov)
        gate = Gate("g", 0, Pose.from_euler((d, 0.0, 5.0), 0.0), 1.4, 1.4, 2.0, 2.0)
        track = Track("one", (gate, Gate("h", 1, Pose.from_euler((d + 40, 0.0, 5.0), 0.0), 1.4, 1.4, 2.0, 2.0)),
                      Bounds((-10, -10, 0), (60, 10, 10)))
        cam = Pose.from_euler((0.0, 0.0, 5.0), 0.0)
        frac = gate_fraction(track, camera, cam, 0)
        # analytic: frontal square of side 2 m at depth d, projected and clipped to the image
        half = camera.fx * 1.0 / d
        w = min(camera.cx + half, camera.width) - max(camera.cx - half, 0.0)
        h = min(camera.cy + half, camera.height) - max(camera.cy - half, 0.0)
        analytic = w * h / (camera.width * camera.height)
        worst = max(worst, abs(frac - analytic) / analytic)
    runtime = time.perf_counter() - t0
    ok = worst <= 0.02
    report(capsys, 11, ok, f"worst relative error={worst:.2%} over {len(cases)} distance/FOV cases (<=2%)",
           runtime, 10.0)
    assert worst <= 0.02
    assert runtime < 10.0


# ---------------------------------------------------------------------------
# 12. iterated best response
# ---------------------------------------------------------------------------

def test_acceptance_12_ibr(capsys):
    t0 = time.perf_counter()
    track = straight_track()
    start = track.gates[0].center - 4.0 * track.gates[0].normal
    me = RigidState.at(start + [0, -0.6, 0])
    opp = RigidState.at(start + [0, 0.6, 0])

    solo = ibr_plan(track, me, None, GameParams(), np.random.default_rng(12))
    best = int(np.argmax(solo.candidate_scores))
    solo_ok = (solo.score == max(solo.candidate_scores)
               and np.array_equal(solo.profile.offsets, solo.candidates[best].offsets)
               and solo.profile.speed_scale == solo.candidates[best].speed_scale)

    game = ibr_plan(track, me, opp, GameParams(grid=5, penalty_weight=1e6), np.random.default_rng(12))
    gaps = [float(np.linalg.norm(a - b)) for a, b in zip(game.profile.offsets, game.opponent_profile.offsets)]
    runtime = time.perf_counter() - t0
    ok = solo_ok and min(gaps) > 1.0
    report(capsys, 12, ok, f"no-opponent choice == penalty-free argmax: {solo_ok}; "
           f"min gate-plane separation={min(gaps):.3f} m (>1)", runtime, 30.0)
    assert solo_ok
    assert min(gaps) > 1.0
    assert runtime < 30.0


@pytest.fixture(autouse=True)
def _quiet_cli_logging(monkeypatch):
    monkeypatch.setenv("DRL_LOG_LEVEL", "error")
