"""Calibrated perspective geometry: projection, undistortion, epipolar
entities, and relative-pose extraction.

Everything downstream of ingestion works in normalized (calibrated) image
coordinates, so projection is a rotation, a translation, and a perspective
division. Pixel coordinates survive only inside detection records.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CheiralityViolation, DegenerateEssential, DistortionDivergence


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with a polynomial radial distortion model.

    focal_x, focal_y are in pixels, principal_point is a 2-vector in pixels,
    radial_distortion holds (k1, k2) or (k1, k2, k3), image_size is
    (width, height) in pixels.
    """

    focal_x: float
    focal_y: float
    principal_point: np.ndarray
    radial_distortion: np.ndarray = field(default_factory=lambda: np.zeros(2))
    image_size: tuple[int, int] = (1920, 1080)

    def __post_init__(self):
        object.__setattr__(self, "principal_point",
                           np.asarray(self.principal_point, dtype=float))
        object.__setattr__(self, "radial_distortion",
                           np.asarray(self.radial_distortion, dtype=float))
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise ValueError("focal lengths must be positive")
        w, h = self.image_size
        cx, cy = self.principal_point
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ValueError("principal point outside the image")

    @property
    def focal_mean(self) -> float:
        """Geometric mean focal, used to convert pixel thresholds to
        normalized units."""
        return float(np.sqrt(self.focal_x * self.focal_y))


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera pose: y = R (X - C).

    R is a 3x3 rotation (orthonormal, det +1), C the camera center in world
    units.
    """

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        C = np.asarray(self.center, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", C)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """The 3x4 projection matrix [R | -RC] for normalized coordinates."""
        return np.hstack([self.rotation, (-self.rotation @ self.center)[:, None]])


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation matrix for the axis-angle 3-vector w."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K + 0.5 * (K @ K)
    k = w / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle of R in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def project(pose: CameraPose, point: np.ndarray) -> np.ndarray:
    """Project a world point into normalized image coordinates.

    Raises CheiralityViolation when the point is not in front of the camera.
    """
    y = pose.rotation @ (np.asarray(point, dtype=float) - pose.center)
    if y[2] <= 0:
        raise CheiralityViolation(f"point depth {y[2]:.6g} <= 0")
    return y[:2] / y[2]


def project_many(pose: CameraPose, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of an (n, 3) array.

    Returns (projections, depths); rows with non-positive depth hold NaN
    instead of raising, so callers can mask them.
    """
    y = (np.asarray(points, dtype=float) - pose.center) @ pose.rotation.T
    z = y[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = y[:, :2] / z[:, None]
    proj[z <= 0] = np.nan
    return proj, z


def _distort_radius_factor(intr: CameraIntrinsics, r2: np.ndarray) -> np.ndarray:
    k = intr.radial_distortion
    f = 1.0 + k[0] * r2 + k[1] * r2 ** 2
    if len(k) > 2:
        f = f + k[2] * r2 ** 3
    return f


def normalized_to_pixel(intr: CameraIntrinsics, pt: np.ndarray) -> np.ndarray:
    """Forward model: distort a normalized point and apply intrinsics.

    Accepts a single 2-vector or an (n, 2) array.
    """
    pt = np.asarray(pt, dtype=float)
    single = pt.ndim == 1
    p = np.atleast_2d(pt)
    r2 = np.sum(p ** 2, axis=1)
    d = p * _distort_radius_factor(intr, r2)[:, None]
    px = np.empty_like(d)
    px[:, 0] = intr.focal_x * d[:, 0] + intr.principal_point[0]
    px[:, 1] = intr.focal_y * d[:, 1] + intr.principal_point[1]
    return px[0] if single else px


def pixel_to_normalized(intr: CameraIntrinsics, px: np.ndarray,
                        max_iter: int = 20, tol: float = 1e-10) -> np.ndarray:
    """Undo intrinsics and radial distortion.

    Fixed-point inversion of the polynomial model; raises
    DistortionDivergence when it fails to converge to ``tol`` in normalized
    units within ``max_iter`` iterations. Accepts a single pixel 2-vector or
    an (n, 2) array.
    """
    px = np.asarray(px, dtype=float)
    single = px.ndim == 1
    p = np.atleast_2d(px)
    if not np.all(np.isfinite(p)):
        raise ValueError("pixel coordinates must be finite")
    xd = np.empty_like(p)
    xd[:, 0] = (p[:, 0] - intr.principal_point[0]) / intr.focal_x
    xd[:, 1] = (p[:, 1] - intr.principal_point[1]) / intr.focal_y
    if not np.any(intr.radial_distortion):
        return xd[0] if single else xd
    x = xd.copy()
    for _ in range(max_iter):
        r2 = np.sum(x ** 2, axis=1)
        x_new = xd / _distort_radius_factor(intr, r2)[:, None]
        step = np.abs(x_new - x).max()
        x = x_new
        if step < tol:
            return x[0] if single else x
    raise DistortionDivergence(
        f"undistortion did not reach {tol:g} in {max_iter} iterations")


@dataclass(frozen=True)
class EssentialMatrix:
    """Essential matrix normalized to Frobenius norm sqrt(2), with the
    (1, 1, 0) singular-value structure enforced."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=float))

    @staticmethod
    def from_any(M: np.ndarray) -> "EssentialMatrix":
        """Project an arbitrary 3x3 matrix onto the essential manifold by
        forcing singular values to (1, 1, 0)."""
        U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
        E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
        return EssentialMatrix(E)

    @staticmethod
    def from_pose(pose: CameraPose) -> "EssentialMatrix":
        """Essential matrix of the relative pose (first camera at identity).

        With y2 = R y1 + t and t = -R C, E = [t]x R.
        """
        t = -pose.rotation @ pose.center
        return EssentialMatrix.from_any(skew(t) @ pose.rotation)


def sampson_distance(E: EssentialMatrix | np.ndarray, a: np.ndarray,
                     b: np.ndarray) -> np.ndarray:
    """First-order geometric distance of (a, b) to exact epipolar
    satisfaction b~' E a~ = 0, in normalized image units.

    a, b are 2-vectors or (n, 2) arrays of points in images 1 and 2.
    Invariant to scaling of E and to (a, b, E) -> (b, a, E').
    """
    M = E.matrix if isinstance(E, EssentialMatrix) else np.asarray(E, dtype=float)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    ah = np.hstack([a, np.ones((len(a), 1))])
    bh = np.hstack([b, np.ones((len(b), 1))])
    Ea = ah @ M.T          # epipolar lines in image 2
    Etb = bh @ M           # epipolar lines in image 1
    alg = np.sum(bh * Ea, axis=1)
    grad2 = Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(alg) / np.sqrt(grad2)
    d = np.where(grad2 > 0, d, 0.0)
    return d[0] if d.shape == (1,) else d


def cheirality_count(pose: CameraPose, a: np.ndarray, b: np.ndarray) -> int:
    """How many correspondences triangulate (midpoint method) in front of
    both the identity camera and ``pose``."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d1 = np.hstack([a, np.ones((len(a), 1))])
    d2 = np.hstack([b, np.ones((len(b), 1))]) @ pose.rotation
    C = pose.center
    a00 = np.sum(d1 * d1, axis=1)
    a01 = -np.sum(d1 * d2, axis=1)
    a11 = np.sum(d2 * d2, axis=1)
    r0 = d1 @ C
    r1 = d2 @ C
    det = -a00 * a11 + a01 * a01
    safe = np.abs(det) > 1e-15
    denom = np.where(safe, det, 1.0)
    s = np.where(safe, (-r0 * a11 - a01 * r1) / denom, 1.0)
    t = np.where(safe, (a00 * r1 + a01 * r0) / denom, 1.0)
    X = 0.5 * (s[:, None] * d1 + C + t[:, None] * d2)
    z1 = X[:, 2]
    z2 = (X - C) @ pose.rotation[2]
    return int(np.sum((z1 > 0) & (z2 > 0) & safe))


def decompose_essential(E: EssentialMatrix, inlier_pairs) -> tuple[CameraPose, int]:
    """Extract the relative pose from E using the cheirality of inlier pairs.

    Among the four (R, t) candidates, returns the second camera's pose (the
    first camera sits at the identity) that puts the most pairs in front of
    both cameras. Translation has unit norm; scale is not observable.
    Raises DegenerateEssential when no candidate wins a strict majority.
    ``inlier_pairs`` is a sequence of (point1, point2) or a pair of arrays.
    """
    if isinstance(inlier_pairs, tuple) and len(inlier_pairs) == 2:
        a, b = np.atleast_2d(inlier_pairs[0]), np.atleast_2d(inlier_pairs[1])
    else:
        if len(inlier_pairs) < 1:
            raise ValueError("need at least one inlier pair")
        a = np.array([p[0] for p in inlier_pairs])
        b = np.array([p[1] for p in inlier_pairs])
    U, _, Vt = np.linalg.svd(E.matrix)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    candidates = [CameraPose(R, -R.T @ tt)
                  for R in (U @ W @ Vt, U @ W.T @ Vt) for tt in (t, -t)]
    counts = [cheirality_count(cand, a, b) for cand in candidates]
    best_idx = int(np.argmax(counts))
    if counts[best_idx] * 2 <= len(a):
        raise DegenerateEssential(
            f"best candidate explains only {counts[best_idx]}/{len(a)} pairs")
    return candidates[best_idx], best_idx
