"""Correspondences between unsynchronized streams.

A detection in one camera has no direct partner in another camera: the
target was somewhere else whenever the other camera exposed. Instead we
interpolate the other camera's 2D track (or the 3D trajectory) with a local
spline and read off the position at the detection's global time. The local
tangent of the 2D interpolation doubles as the image velocity used by the
time-shift solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IllConditioned, InsufficientSamples
from .splines import TrajectoryModel, fit_spline
from .timing import DetectionTrack, Detection2D, TimeModel

# Minimum consecutive detections supporting an interpolation window.
MIN_OVERLAP = 4
# Preferred window size around the bracketing pair.
WINDOW = 8
# Interpolation across a hole wider than this many local frames is refused.
MAX_BRACKET_GAP_FRAMES = 5.0


@dataclass(frozen=True)
class Match2D2D:
    """A detection in one camera paired with the interpolated position (and
    local image velocity) of the target in another camera at the same
    global time."""

    source: Detection2D
    target_point: np.ndarray
    target_velocity: np.ndarray
    time: float


@dataclass(frozen=True)
class Match3D2D:
    """A detection paired with the reconstructed 3D trajectory position at
    its global time."""

    detection: Detection2D
    world_point: np.ndarray
    time: float


def match_2d2d(track_i: DetectionTrack, track_k: DetectionTrack,
               tm_i: TimeModel, tm_k: TimeModel) -> list[Match2D2D]:
    """Interpolated 2D-2D correspondences from camera i into camera k.

    For every detection of camera i whose global time falls strictly inside
    a run of consecutive camera-k detections, a local spline over a window
    of up to 8 (at least 4) k-detections is evaluated at that time. Never
    extrapolates; detections without temporal overlap are skipped.
    """
    if len(track_i) == 0 or len(track_k) == 0:
        return []
    times_i = track_i.times(tm_i)
    times_k = track_k.times(tm_k)
    max_gap = MAX_BRACKET_GAP_FRAMES * tm_k.alpha

    matches: list[Match2D2D] = []
    window_cache: dict[tuple[int, int], object] = {}
    for j, t in enumerate(times_i):
        hi_idx = int(np.searchsorted(times_k, t))
        lo_idx = hi_idx - 1
        if lo_idx < 0 or hi_idx >= len(times_k):
            continue
        if times_k[hi_idx] - times_k[lo_idx] > max_gap:
            continue
        lo = max(0, lo_idx - WINDOW // 2 + 1)
        hi = min(len(times_k), lo + WINDOW)
        lo = max(0, hi - WINDOW)
        if hi - lo < MIN_OVERLAP:
            continue
        key = (lo, hi)
        spline = window_cache.get(key)
        if spline is None:
            spline = _robust_window_fit(times_k[lo:hi], track_k.normalized[lo:hi])
            window_cache[key] = spline
        if spline is None or not spline.contains(t):
            continue
        matches.append(Match2D2D(
            source=track_i.detection(j),
            target_point=spline.eval(t),
            target_velocity=spline.eval_derivative(t, 1),
            time=float(t),
        ))
    return matches


def _robust_window_fit(times: np.ndarray, points: np.ndarray):
    """Local cubic fit with one round of residual trimming, so a stray
    detector outlier inside the window cannot poison the interpolation."""
    span = times[-1] - times[0]
    if span <= 0:
        return None
    try:
        spline = fit_spline(times, points, knot_spacing=span)
    except (InsufficientSamples, IllConditioned):
        return None
    res = np.linalg.norm(spline.eval(times) - points, axis=1)
    keep = res <= max(4.0 * np.median(res), 1e-9)
    if keep.sum() < MIN_OVERLAP or keep.all():
        return spline
    kept_t, kept_p = times[keep], points[keep]
    kept_span = kept_t[-1] - kept_t[0]
    if kept_span <= 0:
        return spline
    try:
        return fit_spline(kept_t, kept_p, knot_spacing=kept_span)
    except (InsufficientSamples, IllConditioned):
        return spline


def match_3d2d(track_k: DetectionTrack, tm_k: TimeModel,
               traj: TrajectoryModel) -> list[Match3D2D]:
    """3D-2D correspondences of a camera's detections against the covered
    parts of the trajectory. Detection times inside gaps yield nothing."""
    if len(track_k) == 0 or traj.is_empty:
        return []
    times = track_k.times(tm_k)
    points, valid = traj.eval_many(times)
    return [Match3D2D(detection=track_k.detection(j), world_point=points[j],
                      time=float(times[j]))
            for j in np.nonzero(valid)[0]]
