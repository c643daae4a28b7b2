"""Incremental reconstruction: pairwise sync sweep, initial pair, camera
registration, trajectory building, and bundle adjustment scheduling.

The global timeline and the pose gauge are anchored to one camera (alpha 1,
beta 0, identity pose). The preferred anchor comes from the configuration;
if the best initial pair does not contain it, the pipeline re-anchors to the
first camera of that pair by exact affine reparameterization of all time
models. The initial pair's baseline has unit length; scale stays arbitrary
until evaluation aligns it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import BACamera, BAOptions, BAProblem, BAReport, solve
from .errors import (
    DegenerateMotion,
    InsufficientMatches,
    NoConsensus,
    NoRegistrableCamera,
    NotEnoughOverlap,
    SkytrackError,
)
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    EssentialMatrix,
    project_many,
    sampson_distance,
)
from .matching import match_2d2d, match_3d2d
from .robust import (
    RansacConfig,
    check_motion_spread,
    p3p_solutions,
    solve_p3p_ransac,
    solve_two_view_sync,
    triangulate_pairs,
)
from .splines import TrajectoryModel
from .timing import DetectionTrack, TimeModel


@dataclass
class PipelineConfig:
    anchor_camera: int = 0
    ransac_px: float = 3.0
    ransac_confidence: float = 0.999
    ransac_max_iterations: int = 10_000
    beta_bound: float = 100.0
    beta_step: float = 0.5
    knot_spacing: float = 5.0
    prior: str = "none"
    prior_weight: float = 0.1
    optimize_rs: bool = True
    two_view_beta: bool = True     # ablation: disable Eq.-style shift search
    ba_sync: bool = True           # ablation: freeze alpha/beta in BA
    ba_max_iterations: int = 200
    min_pair_matches: int = 16
    # one solve per pair: the shift-corrected consensus is flat along the
    # epipolar-invisible direction, so further two-view rounds only wander
    # inside that plateau; bundle adjustment resolves it across cameras
    sweep_refine_rounds: int = 1
    min_motion_eig_ratio: float = 0.01
    seed: int = 0


@dataclass
class CameraState:
    intrinsics: CameraIntrinsics
    nominal_fps: float
    track: DetectionTrack
    time_model: TimeModel
    pose: CameraPose | None = None
    registered: bool = False
    inlier_count: int = 0


@dataclass
class ReconstructionState:
    cameras: list[CameraState]
    trajectory: TrajectoryModel
    anchor_id: int
    config: PipelineConfig
    stats: dict = field(default_factory=dict)
    ba_reports: list[BAReport] = field(default_factory=list)

    @property
    def registered_ids(self) -> list[int]:
        return [i for i, c in enumerate(self.cameras) if c.registered]


def _pair_threshold(cfg: PipelineConfig, a: CameraState, b: CameraState) -> float:
    return cfg.ransac_px / np.sqrt(a.intrinsics.focal_mean * b.intrinsics.focal_mean)


def _ransac_config(cfg: PipelineConfig, threshold: float) -> RansacConfig:
    return RansacConfig(threshold=threshold, confidence=cfg.ransac_confidence,
                        max_iterations=cfg.ransac_max_iterations,
                        beta_bound=cfg.beta_bound, beta_step=cfg.beta_step)


def make_state(tracks: list[DetectionTrack], intrinsics: list[CameraIntrinsics],
               nominal_fps: list[float], config: PipelineConfig | None = None,
               ) -> ReconstructionState:
    """Initial state: nominal time scales relative to the preferred anchor,
    zero offsets, zero readout, no poses."""
    config = config or PipelineConfig()
    if len(tracks) < 2:
        raise ValueError("need at least two cameras")
    anchor = config.anchor_camera
    cams = []
    for i, (track, intr, fps) in enumerate(zip(tracks, intrinsics, nominal_fps)):
        alpha = 1.0 if i == anchor else nominal_fps[anchor] / fps
        cams.append(CameraState(intr, fps, track, TimeModel(alpha=alpha)))
    return ReconstructionState(cameras=cams,
                               trajectory=TrajectoryModel(config.knot_spacing),
                               anchor_id=anchor, config=config)


def pairwise_sync_sweep(state: ReconstructionState,
                        rng: np.random.Generator) -> dict:
    """Two-view geometry and time shift for every overlapping camera pair.

    Within a pair, the denser (higher-fps) track is the spline side; the
    solved shift updates that camera's time model and the matches are
    rebuilt until the shift settles. Shift corrections are then propagated
    to all cameras along a maximum spanning tree (edge weight: inlier
    count) rooted at the anchor.
    """
    cfg = state.config
    table: dict[tuple[int, int], dict] = {}
    degenerate = 0
    for i in range(len(state.cameras)):
        for k in range(i + 1, len(state.cameras)):
            ci, ck = state.cameras[i], state.cameras[k]
            if len(ci.track) == 0 or len(ck.track) == 0:
                continue
            # denser track hosts the interpolation spline
            src, tgt = (i, k) if ck.nominal_fps >= ci.nominal_fps else (k, i)
            cs, ct = state.cameras[src], state.cameras[tgt]
            rcfg = _ransac_config(cfg, _pair_threshold(cfg, cs, ct))
            # once the first round has localized the shift, later rounds
            # only polish a residual of a frame or two
            rcfg_narrow = RansacConfig(
                threshold=rcfg.threshold, confidence=rcfg.confidence,
                max_iterations=rcfg.max_iterations,
                beta_bound=max(3.0, 4.0 * cfg.beta_step),
                beta_step=rcfg.beta_step)
            tm_tgt = ct.time_model
            shift_total, result, matches = 0.0, None, None
            try:
                for rnd in range(max(1, cfg.sweep_refine_rounds)):
                    matches = match_2d2d(cs.track, ct.track, cs.time_model, tm_tgt)
                    if len(matches) < max(8, cfg.min_pair_matches):
                        break
                    result = solve_two_view_sync(
                        matches, rcfg if rnd == 0 else rcfg_narrow, rng,
                        estimate_beta=cfg.two_view_beta)
                    shift_total += result.beta_shift
                    tm_tgt = tm_tgt.with_shift(result.beta_shift)
                    if abs(result.beta_shift) < 0.5 * cfg.beta_step:
                        break
            except DegenerateMotion:
                degenerate += 1
                continue
            except (InsufficientMatches, NoConsensus):
                continue
            if result is None:
                continue
            table[(src, tgt)] = {"result": result, "shift": shift_total,
                                 "n_matches": len(matches)}
    if not table:
        if degenerate:
            raise DegenerateMotion("all camera pairs are motion-degenerate")
        raise NotEnoughOverlap("no camera pair reached consensus")

    _propagate_shifts(state, table, rng)
    return table


def _propagate_shifts(state: ReconstructionState, table: dict,
                      rng: np.random.Generator, tolerance: float = 1.5):
    """Distribute pairwise shift estimates to per-camera corrections.

    Edge (src, tgt) with shift s constrains correction[tgt] -
    correction[src] = s. A pair whose target motion runs along its own
    epipolar planes can be off by several frames while still reporting a
    strong consensus, so edges are selected by mutual consistency: random
    spanning trees are scored by the inlier-weighted count of edges they
    explain within ``tolerance`` frames, and the winning consistent subset
    is refit by weighted least squares with the anchor pinned at zero.
    """
    n = len(state.cameras)
    edges = [(src, tgt, float(e["shift"]), float(len(e["result"].inliers)))
             for (src, tgt), e in table.items()]
    adjacency: dict[int, list[int]] = {}
    for ei, (src, tgt, _, _) in enumerate(edges):
        adjacency.setdefault(src, []).append(ei)
        adjacency.setdefault(tgt, []).append(ei)
    if state.anchor_id not in adjacency:
        state.stats.setdefault("warnings", []).append(
            "anchor camera has no sync edges")
        return
    nodes = sorted(adjacency)
    col = {c: i for i, c in enumerate(nodes)}

    def tree_corrections(order: np.ndarray) -> dict[int, float] | None:
        corr = {state.anchor_id: 0.0}
        changed = True
        while changed:
            changed = False
            for ei in order:
                src, tgt, s, _ = edges[ei]
                if src in corr and tgt not in corr:
                    corr[tgt] = corr[src] + s
                    changed = True
                elif tgt in corr and src not in corr:
                    corr[src] = corr[tgt] - s
                    changed = True
        return corr

    def consensus(corr: dict[int, float]) -> tuple[float, list[int]]:
        good, weight = [], 0.0
        for ei, (src, tgt, s, w) in enumerate(edges):
            if src in corr and tgt in corr \
                    and abs(corr[tgt] - corr[src] - s) <= tolerance:
                good.append(ei)
                weight += w
        return weight, good

    best_weight, best_good = -1.0, []
    for _ in range(200):
        corr = tree_corrections(rng.permutation(len(edges)))
        weight, good = consensus(corr)
        if weight > best_weight:
            best_weight, best_good = weight, good

    # weighted least squares on the consistent subset, anchor pinned
    use = best_good if best_good else list(range(len(edges)))
    A = np.zeros((len(use) + 1, len(nodes)))
    rhs = np.zeros(len(use) + 1)
    w = np.zeros(len(use) + 1)
    for row, ei in enumerate(use):
        src, tgt, s, base_w = edges[ei]
        A[row, col[tgt]] = 1.0
        A[row, col[src]] = -1.0
        rhs[row] = s
        w[row] = base_w
    A[-1, col[state.anchor_id]] = 1.0
    w[-1] = 1e6
    sw = np.sqrt(w)[:, None]
    corr_vec, *_ = np.linalg.lstsq(A * sw, rhs * sw[:, 0], rcond=None)

    # cameras not reachable through consistent edges keep their offsets
    reachable = {state.anchor_id}
    changed = True
    while changed:
        changed = False
        for ei in use:
            src, tgt = edges[ei][0], edges[ei][1]
            if (src in reachable) != (tgt in reachable):
                reachable |= {src, tgt}
                changed = True

    unsynced = []
    for idx, cam in enumerate(state.cameras):
        if idx in reachable:
            if idx != state.anchor_id:
                cam.time_model = cam.time_model.with_shift(float(corr_vec[col[idx]]))
        elif idx in col or idx not in adjacency:
            unsynced.append(idx)
    state.stats["sweep_corrections"] = {
        i: (float(corr_vec[col[i]]) if i in reachable and i in col else None)
        for i in range(n)}
    state.stats["sweep_consistent_edges"] = [
        (edges[ei][0], edges[ei][1]) for ei in use]
    if unsynced:
        state.stats.setdefault("warnings", []).append(
            f"cameras without sync path to anchor: {unsynced}")


def _reanchor(state: ReconstructionState, new_anchor: int):
    ref = state.cameras[new_anchor].time_model
    for cam in state.cameras:
        cam.time_model = cam.time_model.reanchored(ref)
    state.anchor_id = new_anchor


def initialize_pair(state: ReconstructionState, table: dict,
                    rng: np.random.Generator) -> ReconstructionState:
    """Install the best pair's poses, triangulate its inlier matches, and
    start the trajectory. Anchors time and pose to one pair member."""
    cfg = state.config
    if not table:
        raise NotEnoughOverlap("empty pair table")
    key = max(table, key=lambda k: (len(table[k]["result"].inliers), -k[0], -k[1]))
    src, tgt = key
    anchor = cfg.anchor_camera if cfg.anchor_camera in key else src
    _reanchor(state, anchor)

    cs, ct = state.cameras[src], state.cameras[tgt]
    rcfg = _ransac_config(cfg, _pair_threshold(cfg, cs, ct))
    matches = match_2d2d(cs.track, ct.track, cs.time_model, ct.time_model)
    if len(matches) < 8:
        raise NotEnoughOverlap("initial pair lost its matches after re-sync")
    result = solve_two_view_sync(matches, rcfg, rng, estimate_beta=cfg.two_view_beta)
    if tgt != state.anchor_id:
        ct.time_model = ct.time_model.with_shift(result.beta_shift)
    b = result.beta_shift

    # triangulate everything passing a relaxed epipolar gate, not only the
    # solver's inliers: residual clock drift across a long overlap pushes
    # correctly-paired matches past the strict threshold, and a trajectory
    # covering the full overlap matters more here than per-point purity
    # (bundle adjustment owns the drift)
    all_src = np.array([m.source.normalized for m in matches])
    all_tgt = np.array([m.target_point - b * m.target_velocity for m in matches])
    d = sampson_distance(result.essential, all_src, all_tgt)
    keep = d <= 2.0 * _pair_threshold(cfg, cs, ct)
    pts_src, pts_tgt = all_src[keep], all_tgt[keep]
    check_motion_spread(pts_src[np.linspace(0, len(pts_src) - 1,
                                            min(len(pts_src), 500)).astype(int)]
                        if len(pts_src) else all_src, cfg.min_motion_eig_ratio)
    check_motion_spread(pts_tgt, cfg.min_motion_eig_ratio)

    rel = result.relative_pose  # target camera pose with source at identity
    if anchor == src:
        cs.pose = CameraPose.identity()
        ct.pose = rel
    else:
        R, C = rel.rotation, rel.center
        ct.pose = CameraPose.identity()
        cs.pose = CameraPose(R.T, -R @ C)
    cs.registered = ct.registered = True
    cs.inlier_count = ct.inlier_count = len(result.inliers)

    times = np.array([matches[m].time for m in result.inliers])
    X, valid = triangulate_pairs(cs.pose, ct.pose, pts_src, pts_tgt)
    order = np.argsort(times[valid], kind="stable")
    state.trajectory = state.trajectory.extend_or_merge(times[valid][order],
                                                        X[valid][order])
    state.stats["initial_pair"] = {"pair": (src, tgt),
                                   "inliers": int(len(result.inliers)),
                                   "triangulated": int(valid.sum())}
    return state


def _gated_pair_samples(state: ReconstructionState, i: int, k: int,
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Triangulated (times, points) for a registered camera pair, with
    epipolar and cheirality gating against the known relative geometry."""
    cfg = state.config
    ci, ck = state.cameras[i], state.cameras[k]
    src, tgt = (i, k) if ck.nominal_fps >= ci.nominal_fps else (k, i)
    cs, ct = state.cameras[src], state.cameras[tgt]
    matches = match_2d2d(cs.track, ct.track, cs.time_model, ct.time_model)
    if not matches:
        return np.empty(0), np.empty((0, 3))
    a = np.array([m.source.normalized for m in matches])
    bpt = np.array([m.target_point for m in matches])
    times = np.array([m.time for m in matches])

    # relative pose of tgt with src at identity: y_t = R_rel (y_s - C_rel)
    Rs, Cs = cs.pose.rotation, cs.pose.center
    Rt, Ct = ct.pose.rotation, ct.pose.center
    R_rel = Rt @ Rs.T
    C_rel = Rs @ (Ct - Cs)
    E = EssentialMatrix.from_pose(CameraPose(R_rel, C_rel))
    d = sampson_distance(E, a, bpt)
    keep = d <= _pair_threshold(cfg, cs, ct)
    if not np.any(keep):
        return np.empty(0), np.empty((0, 3))
    X, valid = triangulate_pairs(cs.pose, ct.pose, a[keep], bpt[keep])
    t = times[keep][valid]
    order = np.argsort(t, kind="stable")
    return t[order], X[valid][order]


def _registration_beta_refine(state: ReconstructionState, idx: int,
                              rng: np.random.Generator) -> float:
    """Refine a camera's time offset against the reconstructed trajectory
    before absolute pose estimation.

    Pairwise epipolar sync leaves an offset component unobservable whenever
    the target moves along that pair's epipolar planes; reprojection onto
    the 3D trajectory has no such blind direction. Scans a shift grid,
    scoring each cell by the consensus of a fixed bundle of P3P samples,
    then zooms twice around the winner.
    """
    cfg = state.config
    cam = state.cameras[idx]
    threshold = cfg.ransac_px / cam.intrinsics.focal_mean
    n_samples = 12

    def cell_score(tm: TimeModel) -> int:
        matches = match_3d2d(cam.track, tm, state.trajectory)
        if len(matches) < 8:
            return 0
        world = np.array([m.world_point for m in matches])
        obs = np.array([m.detection.normalized for m in matches])
        if len(world) > 300:
            keep = np.linspace(0, len(world) - 1, 300).astype(int)
            world, obs = world[keep], obs[keep]
        best = 0
        for s in range(n_samples):
            tri = sample_triples[s] % len(world)
            if len(set(tri.tolist())) < 3:
                continue
            for pose in p3p_solutions(world[tri], obs[tri]):
                proj, depth = project_many(pose, world)
                err = np.linalg.norm(proj - obs, axis=1)
                ok = (depth > 0) & np.isfinite(err) & (err <= threshold)
                best = max(best, int(ok.sum()))
        return best

    sample_triples = rng.integers(0, 1_000_000, size=(n_samples, 3))
    total = 0.0
    for half, step in ((12.0, 1.0), (1.0, 0.2), (0.2, 0.05)):
        cells = np.arange(-half, half + step / 2, step)
        scores = [cell_score(cam.time_model.with_shift(total + c)) for c in cells]
        total += float(cells[int(np.argmax(scores))])
    if abs(total) > 1e-9:
        cam.time_model = cam.time_model.with_shift(total)
    return total


def register_next_camera(state: ReconstructionState,
                         rng: np.random.Generator) -> int:
    """Register the unregistered camera with the most 3D-2D matches via
    P3P RANSAC, then extend the trajectory with pairs against all
    registered cameras. Returns the registered camera id."""
    cfg = state.config
    candidates = []
    for idx, cam in enumerate(state.cameras):
        if cam.registered or len(cam.track) == 0:
            continue
        matches = match_3d2d(cam.track, cam.time_model, state.trajectory)
        if len(matches) >= 4:
            candidates.append((len(matches), -idx, idx, matches))
    if not candidates:
        raise NoRegistrableCamera("no unregistered camera overlaps the trajectory")
    _, _, idx, matches = max(candidates)
    cam = state.cameras[idx]
    if cfg.two_view_beta:
        shift = _registration_beta_refine(state, idx, rng)
        if abs(shift) > 1e-9:
            matches = match_3d2d(cam.track, cam.time_model, state.trajectory)
            if len(matches) < 4:
                raise NoRegistrableCamera(
                    f"camera {idx} lost trajectory overlap after sync refine")
    rcfg = _ransac_config(cfg, cfg.ransac_px / cam.intrinsics.focal_mean)
    pose, inliers = solve_p3p_ransac(matches, rcfg, rng)
    cam.pose = pose
    cam.registered = True
    cam.inlier_count = len(inliers)

    for other in state.registered_ids:
        if other == idx:
            continue
        t, X = _gated_pair_samples(state, idx, other)
        if len(t):
            state.trajectory = state.trajectory.extend_or_merge(t, X)
    return idx


def _build_ba_problem(state: ReconstructionState) -> BAProblem:
    cfg = state.config
    cams = []
    for idx in state.registered_ids:
        c = state.cameras[idx]
        cams.append(BACamera(
            camera_id=idx,
            pose=c.pose,
            time_model=c.time_model,
            track=c.track,
            huber_delta=cfg.ransac_px / c.intrinsics.focal_mean,
            image_height=float(c.intrinsics.image_size[1]),
            fix_pose=(idx == state.anchor_id),
            fix_sync=(idx == state.anchor_id),
        ))
    options = BAOptions(prior=cfg.prior, prior_weight=cfg.prior_weight,
                        optimize_rs=cfg.optimize_rs, optimize_sync=cfg.ba_sync,
                        max_iterations=cfg.ba_max_iterations)
    return BAProblem(cams, state.trajectory.segments, options)


def bundle_stage(state: ReconstructionState) -> BAReport:
    """One bundle adjustment over all registered cameras and the current
    trajectory; writes refined parameters back into the state."""
    problem = _build_ba_problem(state)
    report = solve(problem)
    for bac in problem.cameras:
        cam = state.cameras[bac.camera_id]
        cam.pose = bac.pose
        cam.time_model = bac.time_model
    state.trajectory = state.trajectory.with_segment_curves(problem.segments)
    state.ba_reports.append(report)
    state.stats.setdefault("rms_px", []).append(reprojection_rms_px(state))
    return report


def reprojection_rms_px(state: ReconstructionState) -> float:
    """Pixel-equivalent reprojection RMS over detections within the
    robust-loss band (3x the RANSAC threshold)."""
    cfg = state.config
    sq, n = 0.0, 0
    for idx in state.registered_ids:
        cam = state.cameras[idx]
        t = cam.track.exposure_times(cam.time_model)
        pts, valid = state.trajectory.eval_many(t)
        if not np.any(valid):
            continue
        proj, depth = project_many(cam.pose, pts[valid])
        ok = depth > 0
        res = (cam.track.normalized[valid][ok] - proj[ok]) * cam.intrinsics.focal_mean
        d2 = np.sum(res ** 2, axis=1)
        band = d2 <= (3.0 * cfg.ransac_px) ** 2
        sq += float(d2[band].sum())
        n += int(band.sum())
    return float(np.sqrt(sq / n)) if n else float("nan")


def run_full_reconstruction(tracks: list[DetectionTrack],
                            intrinsics: list[CameraIntrinsics],
                            nominal_fps: list[float],
                            config: PipelineConfig | None = None,
                            ) -> ReconstructionState:
    """The whole calibration pipeline: sweep, initial pair, registration
    loop with bundle adjustment after every new camera, and a final bundle
    adjustment. Deterministic for a fixed config seed."""
    config = config or PipelineConfig()
    state = make_state(tracks, intrinsics, nominal_fps, config)
    rng = np.random.default_rng(config.seed)

    table = pairwise_sync_sweep(state, rng)
    state.stats["pair_table"] = {
        f"{src}-{tgt}": {"inliers": int(len(e["result"].inliers)),
                         "shift": float(e["shift"]),
                         "n_matches": int(e["n_matches"])}
        for (src, tgt), e in table.items()}
    initialize_pair(state, table, rng)
    if state.trajectory.is_empty:
        raise NotEnoughOverlap("initial pair produced no trajectory segment")
    bundle_stage(state)

    while True:
        try:
            idx = register_next_camera(state, rng)
        except NoRegistrableCamera:
            break
        state.stats.setdefault("registration_order", []).append(idx)
        bundle_stage(state)

    bundle_stage(state)  # final polish
    left = [i for i, c in enumerate(state.cameras) if not c.registered]
    if left:
        state.stats.setdefault("warnings", []).append(
            f"cameras left unregistered: {left}")
    state.stats["coverage"] = state.trajectory.coverage()
    return state


def tracking_mode(state: ReconstructionState,
                  new_tracks: list[DetectionTrack]) -> TrajectoryModel:
    """Frozen-calibration mode: triangulate fresh tracks with the existing
    poses and sync, extend the trajectory, touch nothing else."""
    if len(state.registered_ids) < 2:
        raise SkytrackError("tracking mode needs at least two registered cameras")
    frozen = ReconstructionState(
        cameras=[CameraState(c.intrinsics, c.nominal_fps, t, c.time_model,
                             c.pose, c.registered)
                 for c, t in zip(state.cameras, new_tracks)],
        trajectory=state.trajectory,
        anchor_id=state.anchor_id,
        config=state.config)
    traj = state.trajectory
    reg = frozen.registered_ids
    for ai in range(len(reg)):
        for bi in range(ai + 1, len(reg)):
            t, X = _gated_pair_samples(frozen, reg[ai], reg[bi])
            if len(t):
                traj = traj.extend_or_merge(t, X)
    return traj
