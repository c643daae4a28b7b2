"""Synthetic scenes with exact ground truth.

Generates a smooth 3D flight path, a ring of calibrated cameras with known
poses, per-camera sync parameters and rolling-shutter readout, and simulates
detection tracks with noise, outliers, and dropout. The simulator solves the
rolling-shutter row fixed point exactly, so every emitted detection is the
RS-correct projection of the trajectory at its true exposure time before
noise is added.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FixedPointDivergence
from .evaluation import ErrorReport, align_similarity, error_stats, match_by_time
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    normalized_to_pixel,
    pixel_to_normalized,
    project_many,
)
from .timing import DetectionTrack, TimeModel

DEFAULT_FPS_CYCLE = (30.0, 25.0, 50.0, 60.0)


@dataclass
class SceneSpec:
    """Everything needed to generate a scene reproducibly.

    Times are in anchor frames (camera 0), lengths in meters, pixel
    quantities in pixels. readout_fraction is the portion of the frame
    interval one RS pass takes (1.0 = the full interval, 0 = global
    shutter).
    """

    n_cameras: int = 4
    duration: float = 600.0
    fps: tuple[float, ...] | None = None
    resolution: tuple[int, int] = (1920, 1080)
    focal: float = 1000.0
    distortion: tuple[float, float] = (-0.03, 0.0)
    ring_radius: float = 55.0
    region_xy: float = 40.0
    height_range: tuple[float, float] = (15.0, 40.0)
    max_speed: float = 0.22           # meters per anchor frame
    n_harmonics: int = 4
    betas: tuple[float, ...] | None = None
    beta_range: tuple[float, float] = (-5.0, 5.0)
    alpha_error: float = 0.0          # relative deviation from nominal rate
    readout_fraction: float = 1.0
    readout_direction: int = 1        # +1 top-to-bottom, -1 bottom-to-top
    noise_px: float = 1.0
    outlier_rate: float = 0.0
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("outlier_rate", "dropout_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.noise_px < 0:
            raise ValueError("noise_px must be >= 0")
        if self.n_cameras < 2:
            raise ValueError("need at least two cameras")


@dataclass
class TrajectoryFunction:
    """Smooth flight path as a cubic spline over global time.

    Built from a bounded random walk, so it is non-periodic: a time-shifted
    copy never re-aligns with itself, which keeps time-shifted epipolar
    interpretations of the scene distinguishable (a periodic path would
    genuinely alias).
    """

    curve: "object"   # PiecewiseSpline over a padded time range

    def position(self, t: np.ndarray) -> np.ndarray:
        return self.curve.eval(np.atleast_1d(np.asarray(t, dtype=float)))

    def velocity(self, t: np.ndarray) -> np.ndarray:
        return self.curve.eval_derivative(np.atleast_1d(np.asarray(t, dtype=float)), 1)


@dataclass
class CameraTruth:
    """Per-detection ground truth for one camera."""

    frames: np.ndarray
    true_times: np.ndarray
    true_points: np.ndarray
    clean_pixels: np.ndarray
    outlier_mask: np.ndarray


@dataclass
class GroundTruth:
    trajectory: TrajectoryFunction
    poses: list[CameraPose]
    time_models: list[TimeModel]
    intrinsics: list[CameraIntrinsics]
    nominal_fps: list[float]
    per_camera: list[CameraTruth] = field(default_factory=list)
    speed_stats: dict = field(default_factory=dict)


def _make_trajectory(spec: SceneSpec, rng: np.random.Generator) -> TrajectoryFunction:
    """Bounded random walk through the flight box, smoothed by a cubic
    spline fit and rescaled about the box center to hit the speed target.
    Waypoints cover a padded time range so the rolling-shutter row solver
    can evaluate slightly outside [0, duration]."""
    from .splines import fit_spline

    half = spec.region_xy / 2.0
    lo = np.array([-half, -half, spec.height_range[0]])
    hi = np.array([half, half, spec.height_range[1]])
    step = 25.0
    pad = 3
    n_wp = int(np.ceil(spec.duration / step)) + 1 + 2 * pad
    t_wp = (np.arange(n_wp) - pad) * step

    pos = rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
    heading = rng.normal(size=3)
    heading /= np.linalg.norm(heading)
    points = [pos.copy()]
    for _ in range(n_wp - 1):
        turn = rng.normal(size=3)
        heading = 0.72 * heading + 0.28 * turn / np.linalg.norm(turn)
        heading /= np.linalg.norm(heading)
        nxt = pos + heading * (spec.max_speed * step * rng.uniform(0.55, 0.95))
        for k in range(3):
            if nxt[k] < lo[k] or nxt[k] > hi[k]:
                nxt[k] = np.clip(nxt[k], lo[k], hi[k])
                heading[k] = -heading[k]
        pos = nxt
        points.append(pos.copy())
    curve = fit_spline(t_wp, np.array(points), knot_spacing=2.0 * step)
    traj = TrajectoryFunction(curve)

    ts = np.linspace(0, spec.duration, 2000)
    vmax = np.linalg.norm(traj.velocity(ts), axis=1).max()
    scale = spec.max_speed / max(vmax, 1e-12)
    if scale < 1.0:
        center = np.array([0.0, 0.0, np.mean(spec.height_range)])
        coef = center + (curve.coefficients - center) * scale
        traj = TrajectoryFunction(curve.with_coefficients(coef))
    return traj


def _look_at(center: np.ndarray, target: np.ndarray) -> CameraPose:
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return CameraPose(np.vstack([right, down, forward]), center)


def _camera_ring(spec: SceneSpec, rng: np.random.Generator) -> list[CameraPose]:
    target = np.array([0.0, 0.0, np.mean(spec.height_range)])
    poses = []
    for i in range(spec.n_cameras):
        angle = 2 * np.pi * i / spec.n_cameras + rng.uniform(-0.15, 0.15)
        radius = spec.ring_radius * rng.uniform(0.9, 1.1)
        center = np.array([radius * np.cos(angle), radius * np.sin(angle),
                           rng.uniform(1.0, 2.0)])
        poses.append(_look_at(center, target))
    return poses


def _solve_rs_rows(traj: TrajectoryFunction, pose: CameraPose,
                   intr: CameraIntrinsics, frame_starts: np.ndarray,
                   readout: float, max_iter: int = 50,
                   tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame fixed point: the observed row must equal the projected row
    at its own exposure time. Returns (rows, ok mask); frames where the
    target is invisible are masked out, non-convergence of a visible frame
    raises FixedPointDivergence."""
    h = intr.image_size[1]

    def rows_at(times):
        proj, depth = project_many(pose, traj.position(times))
        px = np.full_like(proj, np.nan)
        vis = depth > 0
        if np.any(vis):
            px[vis] = normalized_to_pixel(intr, proj[vis])
        return px[:, 1], vis

    rows, ok = rows_at(frame_starts)
    if readout == 0.0:
        return rows, ok & np.isfinite(rows)
    converged = np.zeros(len(frame_starts), dtype=bool)
    for _ in range(max_iter):
        active = ok & ~converged
        if not np.any(active):
            break
        new_rows, vis = rows_at(frame_starts[active] + readout * rows[active])
        ok[active] &= vis & np.isfinite(new_rows)
        step = np.abs(new_rows - rows[active])
        rows[active] = new_rows
        conv = np.zeros(len(frame_starts), dtype=bool)
        conv[active] = step < tol
        converged |= conv & ok
    pending = ok & ~converged & (rows >= -h) & (rows <= 2 * h)
    if np.any(pending):
        raise FixedPointDivergence(
            f"{int(pending.sum())} frames did not converge in {max_iter} iterations")
    return rows, ok & converged


def generate(spec: SceneSpec) -> tuple[list[DetectionTrack], GroundTruth]:
    """Simulate detection tracks for all cameras. Deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    traj = _make_trajectory(spec, rng)
    poses = _camera_ring(spec, rng)
    w, h = spec.resolution
    intr = CameraIntrinsics(spec.focal, spec.focal, (w / 2.0, h / 2.0),
                            np.asarray(spec.distortion), (w, h))
    intrinsics = [intr] * spec.n_cameras

    fps_cycle = spec.fps or DEFAULT_FPS_CYCLE
    nominal_fps = [float(fps_cycle[i % len(fps_cycle)]) for i in range(spec.n_cameras)]
    if spec.betas is not None:
        betas = [float(b) for b in spec.betas]
    else:
        betas = [0.0] + list(rng.uniform(*spec.beta_range, size=spec.n_cameras - 1))
    betas[0] = 0.0

    time_models = []
    for i in range(spec.n_cameras):
        alpha = nominal_fps[0] / nominal_fps[i]
        if i > 0 and spec.alpha_error > 0:
            alpha *= 1.0 + rng.uniform(-spec.alpha_error, spec.alpha_error)
        readout = spec.readout_direction * spec.readout_fraction * alpha / h
        time_models.append(TimeModel(alpha=alpha if i else 1.0,
                                     beta=betas[i] if i else 0.0,
                                     rs_readout=readout))

    gt = GroundTruth(traj, poses, time_models, intrinsics, nominal_fps)
    ts = np.linspace(0, spec.duration, 2000)
    speeds = np.linalg.norm(traj.velocity(ts), axis=1)
    gt.speed_stats = {"mean_m_per_frame": float(speeds.mean()),
                      "max_m_per_frame": float(speeds.max()),
                      "mean_kmh": float(speeds.mean() * nominal_fps[0] * 3.6),
                      "max_kmh": float(speeds.max() * nominal_fps[0] * 3.6)}

    tracks = []
    for i in range(spec.n_cameras):
        tm, pose = time_models[i], poses[i]
        cam_rng = np.random.default_rng([spec.seed, 1000 + i])
        n_frames = int(np.floor((spec.duration - tm.beta) / tm.alpha)) + 1
        frames = np.arange(max(0, int(np.ceil(-tm.beta / tm.alpha))), max(n_frames, 0))
        starts = tm.alpha * frames + tm.beta
        in_window = (starts >= 0) & (starts <= spec.duration)
        frames, starts = frames[in_window], starts[in_window]

        rows, ok = _solve_rs_rows(traj, pose, intr, starts, tm.rs_readout)
        t_true = starts + tm.rs_readout * rows
        points = traj.position(t_true)
        proj, depth = project_many(pose, points)
        ok &= depth > 0
        clean_px = np.full((len(frames), 2), np.nan)
        if np.any(ok):
            clean_px[ok] = normalized_to_pixel(intr, proj[ok])
        ok &= (np.isfinite(clean_px).all(axis=1)
               & (clean_px[:, 0] >= 0) & (clean_px[:, 0] < w)
               & (clean_px[:, 1] >= 0) & (clean_px[:, 1] < h))

        frames, t_true = frames[ok], t_true[ok]
        points, clean_px = points[ok], clean_px[ok]

        px = clean_px + cam_rng.normal(0.0, spec.noise_px, size=clean_px.shape)
        outlier = cam_rng.uniform(size=len(frames)) < spec.outlier_rate
        px[outlier, 0] = cam_rng.uniform(0, w, size=int(outlier.sum()))
        px[outlier, 1] = cam_rng.uniform(0, h, size=int(outlier.sum()))
        keep = cam_rng.uniform(size=len(frames)) >= spec.dropout_rate
        keep &= (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)

        frames, px = frames[keep], px[keep]
        gt.per_camera.append(CameraTruth(frames, t_true[keep], points[keep],
                                         clean_px[keep], outlier[keep]))
        tracks.append(DetectionTrack(i, frames, px, pixel_to_normalized(intr, px)))
    return tracks, gt


def sample_ground_truth(gt: GroundTruth, times: np.ndarray) -> np.ndarray:
    return gt.trajectory.position(np.asarray(times, dtype=float))


def compare(state, gt: GroundTruth, step: float = 1.0) -> dict:
    """Align the reconstruction to the ground truth and report errors.

    Samples the reconstructed trajectory at anchor-frame resolution over the
    covered intervals, fits a similarity to the ground-truth positions at
    the same times, and returns trajectory error statistics plus per-camera
    center errors and sync errors.
    """
    est_t, est_p = [], []
    for seg in state.trajectory.segments:
        ts = np.arange(seg.t_min, seg.t_max + step / 2, step)
        est_t.append(ts)
        est_p.append(seg.eval(ts))
    est_times = np.concatenate(est_t)
    est_pts = np.vstack(est_p)
    ref_pts = sample_ground_truth(gt, est_times)

    sim = align_similarity(est_times, est_pts, est_times, ref_pts)
    report = error_stats(sim.apply(est_pts), ref_pts, times=est_times, similarity=sim)

    out = {"trajectory": report}
    reg = [i for i, cam in enumerate(state.cameras) if cam.registered]
    if len(reg) >= 3:
        est_c = np.array([state.cameras[i].pose.center for i in reg])
        ref_c = np.array([gt.poses[i].center for i in reg])
        try:
            cam_sim = align_similarity(np.arange(len(reg)), est_c,
                                       np.arange(len(reg)), ref_c)
            cam_err = np.linalg.norm(cam_sim.apply(est_c) - ref_c, axis=1)
        except Exception:
            cam_err = np.linalg.norm(sim.apply(est_c) - ref_c, axis=1)
        out["camera_center_errors"] = {i: float(e) for i, e in zip(reg, cam_err)}

    sync_err = {}
    anchor_tm = state.cameras[state.anchor_id].time_model
    gt_anchor = gt.time_models[state.anchor_id]
    for i, cam in enumerate(state.cameras):
        if not cam.registered or i == state.anchor_id:
            continue
        est_tm = cam.time_model.reanchored(anchor_tm)
        ref_tm = gt.time_models[i].reanchored(gt_anchor)
        sync_err[i] = {"beta": float(est_tm.beta - ref_tm.beta),
                       "alpha": float(est_tm.alpha - ref_tm.alpha)}
    out["sync_errors"] = sync_err
    return out
