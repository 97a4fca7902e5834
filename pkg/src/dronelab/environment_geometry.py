"""Occupancy voxel grid of the gate frames, signed distance field and queries.

Lattice values live at voxel centres ``origin + (i + 0.5) * resolution``.
Distances are centre-to-centre: free voxels store the distance to the nearest
occupied voxel, occupied voxels store minus the distance to the nearest free
voxel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core_types import Track

Array = np.ndarray

GATE_THICKNESS = 0.1  # m along the gate normal, same band as collision checks
MAX_VOXELS = 64 * 2**20
NO_OBSTACLE_DISTANCE = 1e6  # m, stored when one polarity is absent from the grid
MIN_RESOLUTION = 0.05
MAX_RESOLUTION = 2.0


class GeometryError(ValueError):
    pass


class GridTooLarge(GeometryError):
    pass


class NoFreeSpaceFound(GeometryError):
    pass


@dataclass(frozen=True)
class VoxelGrid:
    origin: Array
    resolution: float
    occupancy: Array  # bool (nx, ny, nz)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.occupancy.shape)

    def centers(self, idx) -> Array:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution


@dataclass(frozen=True)
class SignedDistanceField:
    origin: Array
    resolution: float
    distance: Array  # float64 (nx, ny, nz)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.distance.shape)


def _bars(gate) -> list[tuple[Array, Array]]:
    """The frame band as four boxes in gate-local coordinates (lo, hi)."""
    hx = GATE_THICKNESS / 2
    ow, oh = gate.outer_width / 2, gate.outer_height / 2
    iw, ih = gate.inner_width / 2, gate.inner_height / 2
    boxes = [
        ((-hx, -ow, ih), (hx, ow, oh)),  # top
        ((-hx, -ow, -oh), (hx, ow, -ih)),  # bottom
        ((-hx, iw, -ih), (hx, ow, ih)),  # left
        ((-hx, -ow, -ih), (hx, -iw, ih)),  # right
    ]
    # zero-width bars (outer == inner) carry no material
    return [(np.array(lo), np.array(hi)) for lo, hi in boxes if np.all(np.array(hi) - np.array(lo) > 0)]


def distance_to_frame(gate, points: Array) -> Array:
    """Euclidean distance from world points ``(n, 3)`` to the gate's solid band."""
    local = (np.asarray(points, dtype=float) - gate.pose.position) @ gate.pose.rotation
    best = np.full(len(local), np.inf)
    for lo, hi in _bars(gate):
        gap = np.maximum(np.maximum(lo - local, local - hi), 0.0)
        best = np.minimum(best, np.linalg.norm(gap, axis=1))
    return best


def build_voxel_grid(track: Track, resolution: float) -> VoxelGrid:
    """Point-sampled voxelisation: occupied when the centre is within half a voxel of a frame."""
    if not (MIN_RESOLUTION <= resolution <= MAX_RESOLUTION):
        raise GeometryError(f"resolution must lie in [{MIN_RESOLUTION}, {MAX_RESOLUTION}] m")
    lo = track.world_bounds.min
    extent = track.world_bounds.max - lo
    dims = np.maximum(np.ceil(extent / resolution - 1e-9).astype(int), 1)
    if int(np.prod(dims)) > MAX_VOXELS:
        raise GridTooLarge(f"{int(np.prod(dims))} voxels exceeds {MAX_VOXELS}")
    occ = np.zeros(tuple(dims), dtype=bool)
    reach = 0.5 * resolution
    for gate in track.gates:
        local_corners = np.array([[sx * GATE_THICKNESS / 2, sy * gate.outer_width / 2, sz * gate.outer_height / 2]
                                  for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        world = local_corners @ gate.pose.rotation.T + gate.pose.position
        i0 = np.clip(np.floor((world.min(axis=0) - reach - lo) / resolution - 0.5).astype(int), 0, dims - 1)
        i1 = np.clip(np.ceil((world.max(axis=0) + reach - lo) / resolution - 0.5).astype(int), 0, dims - 1)
        if np.any(i1 < i0):
            continue
        axes = [np.arange(a, b + 1) for a, b in zip(i0, i1)]
        ii, jj, kk = np.meshgrid(*axes, indexing="ij")
        idx = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])
        pts = lo + (idx + 0.5) * resolution
        hit = distance_to_frame(gate, pts) <= reach + 1e-12
        sel = idx[hit]
        occ[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return VoxelGrid(lo.copy(), float(resolution), occ)


def _nearest_sq(mask_targets: Array) -> Array | None:
    """Integer squared lattice distance to the nearest ``True`` voxel, or None if none exist."""
    if not mask_targets.any():
        return None
    # distance_transform_edt measures to the nearest zero, so invert
    idx = ndimage.distance_transform_edt(~mask_targets, return_distances=False, return_indices=True)
    grid = np.indices(mask_targets.shape)
    return np.sum((idx - grid).astype(np.int64) ** 2, axis=0)


def build_sdf(grid: VoxelGrid) -> SignedDistanceField:
    """Exact Euclidean signed distance on the lattice."""
    occ = grid.occupancy
    r = grid.resolution
    dist = np.empty(occ.shape, dtype=np.float64)
    to_occ = _nearest_sq(occ)
    to_free = _nearest_sq(~occ)
    free = ~occ
    dist[free] = r * np.sqrt(to_occ[free]) if to_occ is not None else NO_OBSTACLE_DISTANCE
    dist[occ] = -r * np.sqrt(to_free[occ]) if to_free is not None else -NO_OBSTACLE_DISTANCE
    return SignedDistanceField(grid.origin.copy(), r, dist)


def brute_force_sdf(grid: VoxelGrid) -> Array:
    """Reference signed distance by exhaustive search (small grids only)."""
    occ = grid.occupancy
    coords = np.indices(occ.shape).reshape(3, -1).T
    flat = occ.ravel()
    out = np.empty(flat.shape)
    occ_pts, free_pts = coords[flat], coords[~flat]
    for n, (c, o) in enumerate(zip(coords, flat)):
        targets = free_pts if o else occ_pts
        if len(targets) == 0:
            out[n] = -NO_OBSTACLE_DISTANCE if o else NO_OBSTACLE_DISTANCE
            continue
        d2 = int(np.min(np.sum((targets - c) ** 2, axis=1)))
        out[n] = (-1 if o else 1) * grid.resolution * math.sqrt(d2)
    return out.reshape(occ.shape)


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------

def _lattice_coords(sdf: SignedDistanceField, p) -> tuple[Array, bool]:
    """Continuous lattice index of ``p`` clamped to the lattice, and an out-of-bounds flag."""
    p = np.asarray(p, dtype=float).reshape(3)
    dims = np.array(sdf.dims)
    upper = sdf.origin + dims * sdf.resolution
    oob = bool(np.any(p < sdf.origin) or np.any(p > upper))
    f = (p - sdf.origin) / sdf.resolution - 0.5
    return np.clip(f, 0.0, dims - 1.0), oob


def query_sdf(sdf: SignedDistanceField, p, with_flag: bool = False):
    """Trilinear interpolation of the lattice distances at ``p``."""
    f, oob = _lattice_coords(sdf, p)
    dims = np.array(sdf.dims)
    i0 = np.minimum(np.floor(f).astype(int), np.maximum(dims - 2, 0))
    w = f - i0
    d = sdf.distance
    val = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = i0 + (dx, dy, dz)
                wt = (w[0] if dx else 1 - w[0]) * (w[1] if dy else 1 - w[1]) * (w[2] if dz else 1 - w[2])
                if wt == 0.0:
                    continue
                val += wt * d[min(ix, dims[0] - 1), min(iy, dims[1] - 1), min(iz, dims[2] - 1)]
    return (float(val), oob) if with_flag else float(val)


def query_gradient(sdf: SignedDistanceField, p, step: float | None = None) -> Array:
    """Unit gradient by central differences of the interpolated field (step = resolution)."""
    h = sdf.resolution if step is None else step
    p = np.asarray(p, dtype=float).reshape(3)
    g = np.empty(3)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[a] = (query_sdf(sdf, p + e) - query_sdf(sdf, p - e)) / (2 * h)
    n = np.linalg.norm(g)
    return g / n if n > 1e-9 else g


def is_occupied(grid: VoxelGrid, p) -> bool:
    idx = np.floor((np.asarray(p, dtype=float) - grid.origin) / grid.resolution).astype(int)
    if np.any(idx < 0) or np.any(idx >= np.array(grid.dims)):
        return False
    return bool(grid.occupancy[tuple(idx)])


def nearest_free_point(sdf: SignedDistanceField, p, margin: float = 0.0, max_iter: int = 1000) -> Array:
    """Climb the distance gradient until the interpolated distance exceeds ``margin``."""
    p = np.asarray(p, dtype=float).reshape(3).copy()
    lo = sdf.origin + 0.5 * sdf.resolution
    hi = sdf.origin + (np.array(sdf.dims) - 0.5) * sdf.resolution
    step = 0.5 * sdf.resolution
    for _ in range(max_iter + 1):
        if query_sdf(sdf, p) > margin:
            return p
        g = query_gradient(sdf, p)
        if np.linalg.norm(g) <= 1e-9:
            break
        p = np.clip(p + step * g, lo, hi)
    raise NoFreeSpaceFound("no point with positive clearance reached")


# ---------------------------------------------------------------------------
# dumps
# ---------------------------------------------------------------------------

def _header(tag: str, dims, resolution: float, origin) -> bytes:
    nx, ny, nz = dims
    ox, oy, oz = (float(v) for v in origin)
    return f"{tag} {nx} {ny} {nz} {resolution!r} {ox!r} {oy!r} {oz!r}\n".encode("ascii")


def write_voxel_grid(grid: VoxelGrid, path) -> None:
    """Header line then occupancy bits, C order (z fastest), packed LSB-first."""
    payload = np.packbits(grid.occupancy.ravel(order="C"), bitorder="little").tobytes()
    Path(path).write_bytes(_header("voxgrid v1", grid.dims, grid.resolution, grid.origin) + payload)


def write_sdf(sdf: SignedDistanceField, path) -> None:
    """Header line then float32 little-endian distances, C order (z fastest)."""
    payload = sdf.distance.astype("<f4").ravel(order="C").tobytes()
    Path(path).write_bytes(_header("sdf v1", sdf.dims, sdf.resolution, sdf.origin) + payload)


def _read_header(data: bytes, tag: str) -> tuple[tuple[int, int, int], float, Array, bytes]:
    line, _, rest = data.partition(b"\n")
    parts = line.decode("ascii").split()
    if " ".join(parts[:2]) != tag or len(parts) != 9:
        raise GeometryError(f"not a {tag} file")
    dims = tuple(int(v) for v in parts[2:5])
    return dims, float(parts[5]), np.array([float(v) for v in parts[6:9]]), rest


def read_voxel_grid(path) -> VoxelGrid:
    dims, res, origin, rest = _read_header(Path(path).read_bytes(), "voxgrid v1")
    n = int(np.prod(dims))
    bits = np.unpackbits(np.frombuffer(rest, dtype=np.uint8), count=n, bitorder="little")
    return VoxelGrid(origin, res, bits.astype(bool).reshape(dims))


def read_sdf(path) -> SignedDistanceField:
    dims, res, origin, rest = _read_header(Path(path).read_bytes(), "sdf v1")
    dist = np.frombuffer(rest, dtype="<f4", count=int(np.prod(dims))).astype(np.float64).reshape(dims)
    return SignedDistanceField(origin, res, dist)
