"""Static figures written next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core_types import Track, gate_corners_world  # noqa: E402
from .track_metrics import ComplexityReport  # noqa: E402

# no timestamps or version strings in the files, so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> str:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return str(path)


def plot_curvature(report: ComplexityReport, path) -> str:
    s, k = report.samples[:, 0], report.samples[:, 1]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(s, k, lw=1.0, color="tab:blue")
    for g in report.gate_arc_norm * report.track_length:
        ax.axvline(g, color="0.8", lw=0.6, zorder=0)
    ax.set_xlabel("arc length [m]")
    ax.set_ylabel("curvature [1/m]")
    ax.set_title(f"{report.track_name}: curvature metric {report.curvature_metric:.4f}")
    ax.set_xlim(0, report.track_length)
    fig.tight_layout()
    return _save(fig, path)


def plot_visibility(report: ComplexityReport, path) -> str:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if len(report.visibility):
        ax.plot(report.visibility[:, 0], 100 * report.visibility[:, 1], lw=1.0, color="tab:orange")
    for g in report.gate_arc_norm:
        ax.axvline(g, color="0.8", lw=0.6, zorder=0)
    ax.set_xlabel("normalized arc length")
    ax.set_ylabel("next gate pixels [%]")
    ax.set_title(f"{report.track_name}: gate visibility")
    ax.set_xlim(0, 1)
    fig.tight_layout()
    return _save(fig, path)


def log_trajectories(text: str) -> dict[str, np.ndarray]:
    """``(t, x, y, z)`` rows per racer from a telemetry log; bad lines are skipped."""
    rows: dict[str, list] = {}
    for line in text.splitlines():
        parts = line.split()
        if not parts or line.startswith("#") or len(parts) != 12:
            continue
        try:
            t, x, y, z = (float(v) for v in (parts[0], *parts[2:5]))
        except ValueError:
            continue
        rows.setdefault(parts[1], []).append((t, x, y, z))
    return {rid: np.array(r) for rid, r in rows.items()}


def _draw_gates(ax, track: Track) -> None:
    for g in track.gates:
        c = gate_corners_world(g, use_inner=False)
        ax.plot(c[[0, 3], 0], c[[0, 3], 1], color="k", lw=2.0)
        ax.annotate(str(g.index), g.center[:2], textcoords="offset points", xytext=(4, 4), fontsize=7)


def plot_race(track: Track, paths: dict[str, np.ndarray], path) -> str:
    """Top view (x-y) of every racer's flown path over the gates."""
    fig, ax = plt.subplots(figsize=(6, 6))
    _draw_gates(ax, track)
    for rid in sorted(paths):
        p = paths[rid]
        ax.plot(p[:, 1], p[:, 2], lw=1.0, label=rid)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"{track.name}: flown paths")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_perception_errors(errors: np.ndarray, filtered: np.ndarray, path) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    errors = errors[np.isfinite(errors)]
    filtered = filtered[np.isfinite(filtered)]
    if errors.size:
        hi = float(np.percentile(np.concatenate([errors, filtered]), 99)) or 1.0
        bins = np.linspace(0.0, hi, 40)
        ax.hist(errors, bins=bins, alpha=0.6, label=f"single (median {np.median(errors):.3f} m)")
        if filtered.size:
            ax.hist(filtered, bins=bins, alpha=0.6, label=f"filtered (median {np.median(filtered):.3f} m)")
        ax.legend(fontsize=8)
    ax.set_xlabel("centre error [m]")
    ax.set_ylabel("frames")
    fig.tight_layout()
    return _save(fig, path)


def plot_sdf_slice(distance: np.ndarray, origin, resolution: float, path, z_index: int | None = None) -> str:
    """Horizontal slice of a distance field through ``z_index`` (middle layer by default)."""
    k = distance.shape[2] // 2 if z_index is None else z_index
    sl = np.clip(distance[:, :, k], -5.0, 5.0)
    x0, y0 = origin[0], origin[1]
    extent = (x0, x0 + distance.shape[0] * resolution, y0, y0 + distance.shape[1] * resolution)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(sl.T, origin="lower", extent=extent, cmap="RdBu", vmin=-5, vmax=5)
    fig.colorbar(im, ax=ax, label="signed distance [m] (clipped)")
    z = origin[2] + (k + 0.5) * resolution
    ax.set_title(f"slice z = {z:.2f} m")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.tight_layout()
    return _save(fig, path)


__all__ = ["log_trajectories", "plot_curvature", "plot_perception_errors", "plot_race", "plot_sdf_slice",
           "plot_visibility"]
