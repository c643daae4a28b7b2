"""RANSAC-wrapped minimal solvers: two-view epipolar geometry with a time
shift, P3P absolute pose, and linear triangulation.

The two-view solver estimates, per hypothesis, both an essential matrix and
the relative time shift between the two cameras. The shift enters through
the linear image-motion model: a trial shift b moves the interpolated target
point to x_hat - b * v, where v is the local image velocity of the target
track. The reported ``beta_shift`` is the amount to ADD to the target
camera's time offset so the correspondences line up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateEssential,
    DegenerateMotion,
    InsufficientMatches,
    NoConsensus,
    ParallelRays,
)
from .geometry import (
    CameraPose,
    EssentialMatrix,
    decompose_essential,
    project_many,
    rotation_from_axis_angle,
    sampson_distance,
    skew,
)
from .matching import Match2D2D, Match3D2D


_DEBUG = False


@dataclass(frozen=True)
class RansacConfig:
    """Knobs shared by the robust solvers.

    threshold is a distance in normalized image coordinates (a pixel
    threshold divided by the focal length); beta_bound and beta_step are in
    global frame units.
    """

    threshold: float
    confidence: float = 0.999
    max_iterations: int = 10_000
    beta_bound: float = 100.0
    beta_step: float = 0.5
    min_inlier_ratio: float = 0.25


@dataclass
class TwoViewResult:
    essential: EssentialMatrix
    beta_shift: float
    relative_pose: CameraPose
    inliers: np.ndarray
    inlier_ratio: float
    # relative clock drift over the matched span (frames per frame);
    # informative only, beta_shift is already de-drifted to global time 0
    drift: float = 0.0


def check_motion_spread(points: np.ndarray, min_ratio: float = 0.01) -> None:
    """Reject near-collinear 2D point sets.

    The ratio of covariance eigenvalues must exceed ``min_ratio``; a straight
    image trajectory cannot constrain two-view geometry.
    """
    pts = np.asarray(points, dtype=float)
    cov = np.cov(pts.T)
    w = np.linalg.eigvalsh(cov)
    if w[1] <= 0 or w[0] / w[1] < min_ratio:
        raise DegenerateMotion(
            f"2D point covariance eigenvalue ratio {w[0] / max(w[1], 1e-300):.2e} "
            f"below {min_ratio:g}")


def _epipolar_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """DLT rows: row k is the Kronecker product b_k (x) a_k in homogeneous
    coordinates, so that rows @ vec(E) = 0."""
    ah = np.hstack([a, np.ones((len(a), 1))])
    bh = np.hstack([b, np.ones((len(b), 1))])
    return (bh[:, :, None] * ah[:, None, :]).reshape(len(a), 9)


def _eight_point(a: np.ndarray, b: np.ndarray) -> EssentialMatrix:
    """Linear estimate of E from n >= 8 normalized correspondences,
    projected onto the essential manifold."""
    _, _, Vt = np.linalg.svd(_epipolar_rows(a, b))
    return EssentialMatrix.from_any(Vt[-1].reshape(3, 3))


def _project_essential_batch(Eraw: np.ndarray) -> np.ndarray:
    U, _, Vh = np.linalg.svd(Eraw)
    D = np.zeros_like(Eraw)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    return U @ D @ Vh


def _sampson_grid(Es: np.ndarray, a: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Sampson distances for a stack of (E, corrected targets): (g, n)."""
    n = a.shape[0]
    ah = np.hstack([a, np.ones((n, 1))])
    bh = np.concatenate([targets, np.ones((targets.shape[0], n, 1))], axis=2)
    Ea = np.einsum("gij,nj->gni", Es, ah)
    Etb = np.einsum("gji,gnj->gni", Es, bh)
    alg = np.sum(bh * Ea, axis=2)
    grad2 = Ea[:, :, 0] ** 2 + Ea[:, :, 1] ** 2 + Etb[:, :, 0] ** 2 + Etb[:, :, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(alg) / np.sqrt(grad2)
    return np.where(grad2 > 0, d, 0.0)


def _theta_family(null_vecs: np.ndarray, n_theta: int) -> np.ndarray:
    """The pencil spanned by the two smallest right singular vectors of the
    DLT system, as unit-norm 3x3 matrices.

    Trajectory-induced correspondences are quasi-degenerate: the DLT system
    has two comparably small singular values, so the epipolar constraint
    alone leaves a one-parameter family of near-solutions that consensus
    scoring must disambiguate. Members are kept raw (fundamental-like);
    forcing the essential singular-value structure this early costs real
    inliers, so essentialness is enforced later by manifold refinement."""
    th = np.linspace(0.0, np.pi, n_theta, endpoint=False)
    pencil = (np.cos(th)[:, None] * null_vecs[-1][None, :]
              + np.sin(th)[:, None] * null_vecs[-2][None, :])
    pencil = pencil / np.linalg.norm(pencil, axis=1, keepdims=True)
    return pencil.reshape(-1, 3, 3)


def _refine_essential_sync(E: np.ndarray, a: np.ndarray, b_pts: np.ndarray,
                           v: np.ndarray, t_basis: np.ndarray | None = None,
                           iterations: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Damped Gauss-Newton on the essential manifold, jointly with a time
    correction expressed in a per-match basis, minimizing Sampson residuals
    of corrected correspondences b_pts - (t_basis @ coeffs) * v.

    ``t_basis`` is (n, p): a constant column estimates a shift, a centered
    time column adds relative clock drift. None freezes the correction.
    The (E, shift) landscape is a curved valley; alternating single-axis
    refinements stall on its wall, the joint step follows it down. E is
    parameterized by its relative pose (3 rotation + 2 unit-translation
    degrees of freedom); the Jacobian is numeric.
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R = U @ W @ Vt
    t = U[:, 2]
    p = 0 if t_basis is None else t_basis.shape[1]
    coeffs = np.zeros(p)

    def residuals(Rc, tc, cc):
        corr = b_pts if p == 0 else b_pts - (t_basis @ cc)[:, None] * v
        return np.atleast_1d(sampson_distance(skew(tc) @ Rc, a, corr))

    lam = 1e-4
    r0 = residuals(R, t, coeffs)
    cost = float(r0 @ r0)
    h = 1e-7
    for _ in range(iterations):
        tb = np.linalg.svd(t[None, :])[2][1:]   # tangent basis at unit t
        J = np.empty((len(a), 5 + p))
        for k in range(3):
            Rk = rotation_from_axis_angle(h * np.eye(3)[k]) @ R
            J[:, k] = (residuals(Rk, t, coeffs) - r0) / h
        for k in range(2):
            tk = t + h * tb[k]
            J[:, 3 + k] = (residuals(R, tk / np.linalg.norm(tk), coeffs) - r0) / h
        for k in range(p):
            ck = coeffs.copy()
            ck[k] += 1e-5
            J[:, 5 + k] = (residuals(R, t, ck) - r0) / 1e-5
        g = J.T @ r0
        H = J.T @ J
        stepped = False
        while lam < 1e9:
            try:
                d = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
            except np.linalg.LinAlgError:
                break
            R2 = rotation_from_axis_angle(d[:3]) @ R
            t2 = t + d[3] * tb[0] + d[4] * tb[1]
            t2 = t2 / np.linalg.norm(t2)
            c2 = coeffs + d[5:]
            r2 = residuals(R2, t2, c2)
            cost2 = float(r2 @ r2)
            if cost2 < cost:
                R, t, coeffs, r0, cost = R2, t2, c2, r2, cost2
                lam = max(lam / 3.0, 1e-10)
                stepped = True
                break
            lam *= 5.0
        if not stepped:
            break
    E_out = skew(t) @ R
    return E_out * (np.sqrt(2.0) / np.linalg.norm(E_out)), coeffs


# threshold ladder for annealed consensus growth
_GROWTH_LADDER = (4.0, 2.5, 1.5, 1.0, 1.0, 1.0)


def solve_two_view_sync(matches: list[Match2D2D], cfg: RansacConfig,
                        rng: np.random.Generator,
                        estimate_beta: bool = True) -> TwoViewResult:
    """Jointly estimate the essential matrix and the relative time shift.

    The shift axis is swept on a coarse grid. Correspondences at a trial
    shift b are built by re-pairing: each source detection is paired with
    the interpolated target sample nearest its shifted time plus a linear
    velocity correction for the sub-sample remainder, so the correction
    error stays bounded by one sample spacing regardless of the shift
    magnitude. That is what makes large desynchronizations recoverable.

    Per cell, random 8-match samples are solved linearly and expanded into
    the quasi-degenerate null-space pencil; each cell's best seeds are
    amplified by annealed Gauss-Newton consensus growth at the cell's
    shift. The strongest cells then release the shift into a joint
    (E, shift) refinement with re-pairing refreshed between runs, and the
    best-supported model that also passes a cheirality check wins.

    ``beta_shift`` is the amount to add to the target camera's time
    offset. Raises InsufficientMatches, DegenerateMotion, or NoConsensus.
    """
    n = len(matches)
    if n < 8:
        raise InsufficientMatches(f"{n} matches, need >= 8")
    order0 = np.argsort([m.time for m in matches], kind="stable")
    src = np.array([matches[i].source.normalized for i in order0])
    tgt = np.array([matches[i].target_point for i in order0])
    vel = np.array([matches[i].target_velocity for i in order0])
    times = np.array([matches[i].time for i in order0])
    if not np.all(np.isfinite(vel)):
        raise InsufficientMatches("matches carry non-finite velocities")
    check_motion_spread(src)
    check_motion_spread(tgt)

    spacing = float(np.median(np.diff(times))) if n > 1 else 1.0
    max_dt = max(1.5 * spacing, 0.51 * cfg.beta_step)
    t_mid = float(times.mean())
    span = float(times[-1] - times[0])

    def repair(b: float, drift: float = 0.0):
        """Correspondences at time correction b + drift * (t - t_mid):
        nearest-sample index per source, corrected target points, and the
        validity mask."""
        want = times - (b + drift * (times - t_mid))
        pos = np.searchsorted(times, want)
        left = np.clip(pos - 1, 0, n - 1)
        right = np.clip(pos, 0, n - 1)
        jp = np.where(np.abs(times[right] - want) < np.abs(times[left] - want),
                      right, left)
        delta = want - times[jp]
        valid = np.abs(delta) <= max_dt
        return jp, tgt[jp] + delta[:, None] * vel[jp], valid

    def count_at(E: np.ndarray, b: float, drift: float = 0.0,
                 thr: float | None = None):
        jp, corr, valid = repair(b, drift)
        d = np.atleast_1d(sampson_distance(E, src, corr))
        mask = valid & (d <= (thr if thr is not None else cfg.threshold))
        return mask, (int(mask.sum()), -float(d[mask].sum())), jp, corr, valid

    def physical(E: np.ndarray, mask: np.ndarray, corr: np.ndarray) -> bool:
        """Spurious curve-to-curve geometries collect epipolar inliers but
        fail cheirality: require a decomposition that puts a majority of
        the inliers in front of both cameras."""
        idx = np.nonzero(mask)[0]
        if len(idx) > 64:
            idx = idx[np.linspace(0, len(idx) - 1, 64).astype(int)]
        try:
            decompose_essential(EssentialMatrix.from_any(E),
                                (src[idx], corr[idx]))
            return True
        except DegenerateEssential:
            return False

    subset = np.arange(n) if n <= 120 else np.linspace(0, n - 1, 120).astype(int)

    def cell_seeds(corr: np.ndarray, valid: np.ndarray, keep: int = 2):
        """Pencil-expanded minimal-sample estimates at fixed corrected
        targets, ranked by subset consensus."""
        sv = subset[valid[subset]]
        if len(sv) < 8:
            return []
        out = []
        for s in range(len(sample_rows)):
            idx = sample_rows[s][valid[sample_rows[s]]][:8]
            if len(idx) < 8:
                continue
            rows = _epipolar_rows(src[idx], corr[idx])
            try:
                _, _, Vt = np.linalg.svd(rows)
            except np.linalg.LinAlgError:
                continue
            Es = _theta_family(Vt, 10)
            d = _sampson_grid(Es, src[sv],
                              np.broadcast_to(corr[sv], (len(Es), len(sv), 2)))
            counts = (d <= cfg.threshold).sum(axis=1)
            gi = int(np.argmax(counts))
            out.append((int(counts[gi]), s, Es[gi]))
        out.sort(key=lambda e: (-e[0], e[1]))
        return [(c, E) for c, _, E in out[:keep]]

    def grow(E: np.ndarray, b: float, sv: np.ndarray | None = None,
             ladder: tuple = _GROWTH_LADDER, gn_iterations: int = 20):
        """Annealed Gauss-Newton consensus growth at a fixed shift. When
        ``sv`` is given, growth runs on that subset (cheap screening)."""
        jp, corr, valid = repair(b)
        if sv is None:
            a_g, c_g, v_g, valid_g = src, corr, vel[jp], valid
        else:
            a_g, c_g, v_g, valid_g = src[sv], corr[sv], vel[jp[sv]], valid[sv]
        for f in ladder:
            d = np.atleast_1d(sampson_distance(E, a_g, c_g))
            idx = np.nonzero(valid_g & (d <= f * cfg.threshold))[0]
            if len(idx) < 8:
                return 0, E
            E, _ = _refine_essential_sync(E, a_g[idx], c_g[idx], v_g[idx],
                                          t_basis=None,
                                          iterations=gn_iterations)
        d = np.atleast_1d(sampson_distance(E, a_g, c_g))
        return int((valid_g & (d <= cfg.threshold)).sum()), E

    def release(E: np.ndarray, b: float, rounds: int = 10):
        """Joint (E, shift, drift) refinement with re-pairing refreshed
        between runs; the refiner works on the linear remainder around the
        current pairing, so its corrections fold back into the absolute
        ones. Drift joins once the shift has settled, and only when the
        matched span can support it."""
        key = None
        prev = -1
        drift = 0.0
        for r in range(rounds):
            mask, _, jp, corr, _ = count_at(E, b, drift, 1.5 * cfg.threshold)
            idx = np.nonzero(mask)[0]
            if len(idx) < 8:
                return None
            if not estimate_beta:
                basis = None
            elif r >= 2 and span > 100.0:
                basis = np.column_stack([np.ones(len(idx)),
                                         times[idx] - t_mid])
            else:
                basis = np.ones((len(idx), 1))
            E, eps = _refine_essential_sync(E, src[idx], corr[idx],
                                            vel[jp[idx]], t_basis=basis)
            if basis is not None:
                b = b + float(eps[0])
                if len(eps) > 1:
                    drift = drift + float(eps[1])
            step = 0.0 if basis is None else float(np.abs(eps).max())
            mask, key, _, corr, _ = count_at(E, b, drift)
            if step < 1e-4 and key[0] <= prev:
                break
            prev = key[0]
        if key is None or key[0] < 8:
            return None
        return key, E, b, drift, mask, corr

    if estimate_beta:
        cells = np.arange(-cfg.beta_bound, cfg.beta_bound + cfg.beta_step,
                          2.0 * cfg.beta_step)
    else:
        cells = np.array([0.0])

    sample_rows = np.argsort(rng.random((4, n)), axis=1)[:, :12]

    # screening: amplify every cell's seeds on the match subset
    screened = []
    for b in cells:
        _, corr, valid = repair(float(b))
        best_c, best_E = -1, None
        for c0, E0 in cell_seeds(corr, valid):
            c1, E1 = grow(E0, float(b), sv=subset,
                          ladder=(4.0, 2.0, 1.0), gn_iterations=6)
            if c1 > best_c:
                best_c, best_E = c1, E1
        if best_E is not None and best_c >= 8:
            screened.append((best_c, float(b), best_E))
    if not screened:
        raise NoConsensus("no shift cell accumulated a consensus seed")
    screened.sort(key=lambda e: (-e[0], abs(e[1])))
    leads = []
    for c, b, E in screened:
        if all(abs(b - lb) > 2.0 * cfg.beta_step for _, lb, _ in leads):
            leads.append((c, b, E))
        if len(leads) == 5:
            break
    if _DEBUG:
        print("leads:", [(round(b, 2), c) for c, b, _ in leads])

    best = None
    for _, b0, E0 in leads:
        c_full, E1 = grow(E0, b0)
        if c_full < 8:
            continue
        out = release(E1, b0)
        if _DEBUG:
            print("  lead b0=%.2f grown=%d ->" % (b0, c_full),
                  "failed" if out is None else
                  f"b={out[2]:+.3f} drift={out[3]:+.5f} count={out[0][0]}")
        if out is None:
            continue
        key, E, b, drift, mask, corr = out
        if (best is None or key > best[0]) and physical(E, mask, corr):
            best = (key, E, b, drift, mask, corr)

    if best is None or best[0][0] < max(8, cfg.min_inlier_ratio * n):
        got = 0 if best is None else best[0][0]
        raise NoConsensus(f"best consensus {got}/{n} below "
                          f"{cfg.min_inlier_ratio:.0%}")
    _, E, b, drift, mask, corr = best
    idx = np.nonzero(mask)[0]
    essential = EssentialMatrix.from_any(E)
    pose, _ = decompose_essential(essential, (src[idx], corr[idx]))
    inliers = np.sort(order0[idx])
    # report the shift at global time zero, where per-camera offsets live
    beta0 = float(b - drift * t_mid)
    return TwoViewResult(essential=essential, beta_shift=beta0,
                         relative_pose=pose, inliers=inliers,
                         inlier_ratio=len(inliers) / n, drift=float(drift))


# -- P3P ---------------------------------------------------------------------

def _rigid_fit(X: np.ndarray, Y: np.ndarray) -> CameraPose:
    """Least-squares rigid transform with Y ~= R X + t, returned as a
    CameraPose (y = R (x - C))."""
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    U, _, Vt = np.linalg.svd(Yc.T @ Xc)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ S @ Vt
    t = Y.mean(axis=0) - R @ X.mean(axis=0)
    return CameraPose(R, -R.T @ t)


def p3p_solutions(world: np.ndarray, observed: np.ndarray) -> list[CameraPose]:
    """Minimal absolute pose from 3 world points and 3 normalized image
    points (Grunert's distance formulation, quartic in the depth ratio).

    Returns up to four candidate poses; may be empty for degenerate input.
    """
    world = np.asarray(world, dtype=float)
    observed = np.asarray(observed, dtype=float)
    f = np.hstack([observed, np.ones((3, 1))])
    f = f / np.linalg.norm(f, axis=1, keepdims=True)

    P1, P2, P3 = world
    a = np.linalg.norm(P2 - P3)
    b = np.linalg.norm(P1 - P3)
    c = np.linalg.norm(P1 - P2)
    if min(a, b, c) < 1e-12 or np.linalg.norm(np.cross(P2 - P1, P3 - P1)) < 1e-12:
        return []
    cos_al = float(f[1] @ f[2])
    cos_be = float(f[0] @ f[2])
    cos_ga = float(f[0] @ f[1])

    q = (a * a - c * c) / (b * b)
    r = (a * a + c * c) / (b * b)
    A4 = (q - 1.0) ** 2 - 4.0 * c * c / (b * b) * cos_al ** 2
    A3 = 4.0 * (q * (1.0 - q) * cos_be - (1.0 - r) * cos_al * cos_ga
                + 2.0 * c * c / (b * b) * cos_al ** 2 * cos_be)
    A2 = 2.0 * (q * q - 1.0 + 2.0 * q * q * cos_be ** 2
                + 2.0 * (b * b - c * c) / (b * b) * cos_al ** 2
                - 4.0 * r * cos_al * cos_be * cos_ga
                + 2.0 * (b * b - a * a) / (b * b) * cos_ga ** 2)
    A1 = 4.0 * (-q * (1.0 + q) * cos_be + 2.0 * a * a / (b * b) * cos_ga ** 2 * cos_be
                - (1.0 - r) * cos_al * cos_ga)
    A0 = (1.0 + q) ** 2 - 4.0 * a * a / (b * b) * cos_ga ** 2

    coeffs = np.array([A4, A3, A2, A1, A0])
    if np.abs(coeffs).max() < 1e-15:
        return []
    roots = np.roots(coeffs)
    poses = []
    for v in roots:
        if abs(v.imag) > 1e-8 * max(1.0, abs(v.real)):
            continue
        v = float(v.real)
        denom = 1.0 + v * v - 2.0 * v * cos_be
        if denom <= 1e-15 or v <= 0:
            continue
        s1 = b / np.sqrt(denom)
        u_den = 2.0 * (cos_ga - v * cos_al)
        if abs(u_den) < 1e-12:
            continue
        u = ((q - 1.0) * v * v - 2.0 * q * cos_be * v + 1.0 + q) / u_den
        if u <= 0:
            continue
        s2, s3 = u * s1, v * s1
        Y = np.vstack([s1 * f[0], s2 * f[1], s3 * f[2]])
        try:
            poses.append(_rigid_fit(world, Y))
        except ValueError:
            continue
    return poses


def refine_pose(world: np.ndarray, observed: np.ndarray, pose: CameraPose,
                iterations: int = 15) -> CameraPose:
    """Damped Gauss-Newton polish of an absolute pose on its inlier set,
    minimizing normalized reprojection error."""
    R, C = pose.rotation.copy(), pose.center.copy()
    lam = 1e-6

    def residuals(Rc, Cc):
        y = (world - Cc) @ Rc.T
        z = np.maximum(y[:, 2], 1e-12)
        return (observed - y[:, :2] / z[:, None]).ravel(), y

    res, y = residuals(R, C)
    cost = res @ res
    for _ in range(iterations):
        z = np.maximum(y[:, 2], 1e-12)
        n = len(world)
        A = np.zeros((n, 2, 3))
        A[:, 0, 0] = 1.0 / z
        A[:, 1, 1] = 1.0 / z
        A[:, 0, 2] = -y[:, 0] / z ** 2
        A[:, 1, 2] = -y[:, 1] / z ** 2
        Jw = np.einsum("nij,njk->nik", A, np.stack([skew(yi) for yi in y]))
        Jc = np.einsum("nij,jk->nik", A, R)
        J = np.concatenate([Jw, Jc], axis=2).reshape(2 * n, 6)
        g = J.T @ res
        H = J.T @ J
        try:
            delta = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        R_new = rotation_from_axis_angle(delta[:3]) @ R
        C_new = C + delta[3:]
        res_new, y_new = residuals(R_new, C_new)
        cost_new = res_new @ res_new
        if cost_new < cost:
            R, C, res, y, cost = R_new, C_new, res_new, y_new, cost_new
            lam = max(lam / 4, 1e-12)
        else:
            lam *= 10
            if lam > 1e8:
                break
    return CameraPose(R, C)


def solve_p3p_ransac(matches: list[Match3D2D], cfg: RansacConfig,
                     rng: np.random.Generator) -> tuple[CameraPose, np.ndarray]:
    """Absolute pose from 3D-2D matches: P3P minimal samples inside RANSAC,
    then Gauss-Newton refinement on the inliers."""
    n = len(matches)
    if n < 4:
        raise InsufficientMatches(f"{n} matches, need >= 4")
    world = np.array([m.world_point for m in matches])
    obs = np.array([m.detection.normalized for m in matches])

    best = None  # (count, -sum_dist, pose, mask)
    max_iter = cfg.max_iterations
    it = 0
    while it < max_iter:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        for pose in p3p_solutions(world[idx], obs[idx]):
            proj, depth = project_many(pose, world)
            err = np.linalg.norm(proj - obs, axis=1)
            mask = (depth > 0) & np.isfinite(err) & (err <= cfg.threshold)
            count = int(mask.sum())
            key = (count, -float(err[mask].sum()))
            if best is None or key > best[0]:
                best = (key, pose, mask)
                w = count / n
                if w >= 1.0:
                    it = max_iter
                    break
                denom = np.log1p(-min(w ** 3, 1 - 1e-12))
                max_iter = min(cfg.max_iterations,
                               int(np.ceil(np.log(1 - cfg.confidence) / denom)))

    if best is None or best[0][0] < max(4, cfg.min_inlier_ratio * n):
        got = 0 if best is None else best[0][0]
        raise NoConsensus(f"best consensus {got}/{n} below "
                          f"{cfg.min_inlier_ratio:.0%}")
    _, pose, mask = best
    for _ in range(2):
        pose = refine_pose(world[mask], obs[mask], pose)
        proj, depth = project_many(pose, world)
        err = np.linalg.norm(proj - obs, axis=1)
        mask = (depth > 0) & np.isfinite(err) & (err <= cfg.threshold)
        if mask.sum() < 4:
            raise NoConsensus("inlier set collapsed during refinement")
    return pose, np.nonzero(mask)[0]


# -- triangulation -----------------------------------------------------------

def triangulate(observations: list[tuple[CameraPose, np.ndarray, float]]) -> np.ndarray:
    """Linear (DLT) triangulation from two or more weighted observations.

    Each observation is (pose, normalized point, weight). Raises ParallelRays
    for coincident centers or parallel viewing rays, BehindCamera when the
    solution fails the cheirality check in any view.
    """
    if len(observations) < 2:
        raise ValueError("need at least two observations")
    centers = np.array([pose.center for pose, _, _ in observations])
    dirs = np.array([pose.rotation.T @ np.array([pt[0], pt[1], 1.0])
                     for pose, pt, _ in observations])
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    if np.all(np.linalg.norm(centers - centers[0], axis=1) < 1e-12):
        raise ParallelRays("all camera centers coincide")
    max_angle = 0.0
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            cosang = np.clip(abs(dirs[i] @ dirs[j]), -1.0, 1.0)
            max_angle = max(max_angle, float(np.arccos(cosang)))
    if max_angle < 1e-8:
        raise ParallelRays(f"max ray angle {max_angle:.2e} rad")

    rows = []
    for pose, pt, w in observations:
        P = pose.matrix()
        rows.append(w * (pt[0] * P[2] - P[0]))
        rows.append(w * (pt[1] * P[2] - P[1]))
    A = np.vstack(rows)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12 * np.linalg.norm(Xh[:3]):
        raise ParallelRays("triangulated point at infinity")
    X = Xh[:3] / Xh[3]
    for pose, _, _ in observations:
        if (pose.rotation @ (X - pose.center))[2] <= 0:
            raise BehindCamera("triangulated point behind a camera")
    return X


def triangulate_pairs(pose_a: CameraPose, pose_b: CameraPose,
                      pts_a: np.ndarray, pts_b: np.ndarray,
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Batched two-view DLT for many correspondences at once.

    Returns (points (n, 3), valid mask); rows failing cheirality or with
    near-parallel rays are masked out rather than raised.
    """
    pts_a = np.asarray(pts_a, dtype=float).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=float).reshape(-1, 2)
    n = len(pts_a)
    Pa, Pb = pose_a.matrix(), pose_b.matrix()
    A = np.empty((n, 4, 4))
    A[:, 0] = pts_a[:, 0, None] * Pa[2] - Pa[0]
    A[:, 1] = pts_a[:, 1, None] * Pa[2] - Pa[1]
    A[:, 2] = pts_b[:, 0, None] * Pb[2] - Pb[0]
    A[:, 3] = pts_b[:, 1, None] * Pb[2] - Pb[1]
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    w = Xh[:, 3]
    valid = np.abs(w) > 1e-12 * np.linalg.norm(Xh[:, :3], axis=1)
    X = np.full((n, 3), np.nan)
    X[valid] = Xh[valid, :3] / w[valid, None]
    for pose in (pose_a, pose_b):
        z = (X - pose.center) @ pose.rotation.T[:, 2]
        valid &= np.where(np.isfinite(z), z > 0, False)
    return X, valid
