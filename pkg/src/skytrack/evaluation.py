"""Trajectory and pose accuracy metrics.

A reconstruction lives in an arbitrary similarity gauge, so errors are
computed after fitting the closed-form least-squares similarity (rotation,
uniform scale, translation) that best maps the estimate onto the reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CollinearSamples, InsufficientOverlap

# Samples are considered simultaneous within this many anchor frames.
TIME_TOLERANCE = 0.5


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T \
            + self.translation

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, np.eye(3), np.zeros(3))


@dataclass
class ErrorReport:
    """Distance statistics between time-matched trajectory samples."""

    mean: float
    rmse: float
    median: float
    outlier_pct: float
    distances: np.ndarray
    times: np.ndarray | None = None
    similarity: SimilarityTransform | None = None

    def to_dict(self) -> dict:
        out = {"mean": self.mean, "rmse": self.rmse, "median": self.median,
               "outlier_pct": self.outlier_pct, "n_samples": int(len(self.distances))}
        if self.similarity is not None:
            out["similarity"] = {"scale": self.similarity.scale,
                                 "rotation": self.similarity.rotation.tolist(),
                                 "translation": self.similarity.translation.tolist()}
        return out


def match_by_time(times_a: np.ndarray, times_b: np.ndarray,
                  tolerance: float = TIME_TOLERANCE) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (ia, ib) of samples whose timestamps agree within
    ``tolerance``; each a-sample is matched to its nearest b-sample."""
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    if len(times_a) == 0 or len(times_b) == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    pos = np.searchsorted(times_b, times_a)
    left = np.clip(pos - 1, 0, len(times_b) - 1)
    right = np.clip(pos, 0, len(times_b) - 1)
    nearer = np.where(np.abs(times_b[right] - times_a)
                      < np.abs(times_b[left] - times_a), right, left)
    good = np.abs(times_b[nearer] - times_a) <= tolerance
    return np.nonzero(good)[0], nearer[good]


def _umeyama(est: np.ndarray, ref: np.ndarray) -> SimilarityTransform:
    """Closed-form least-squares similarity with ref ~= s R est + t."""
    mu_e = est.mean(axis=0)
    mu_r = ref.mean(axis=0)
    ec = est - mu_e
    rc = ref - mu_r
    cov = rc.T @ ec / len(est)
    U, D, Vt = np.linalg.svd(cov)
    S = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U) * np.linalg.det(Vt))) or 1.0])
    R = U @ S @ Vt
    var_e = float(np.mean(np.sum(ec ** 2, axis=1)))
    s = float(np.trace(np.diag(D) @ S)) / var_e
    t = mu_r - s * R @ mu_e
    return SimilarityTransform(s, R, t)


def _check_spread(points: np.ndarray):
    w = np.linalg.eigvalsh(np.cov(points.T))
    if w[1] <= 1e-12 * max(w[2], 1e-300):
        raise CollinearSamples("alignment samples are collinear")


def align_similarity(est_times: np.ndarray, est_points: np.ndarray,
                     ref_times: np.ndarray, ref_points: np.ndarray,
                     time_tolerance: float = TIME_TOLERANCE) -> SimilarityTransform:
    """Similarity transform mapping the estimate onto the reference, fit on
    samples matched by nearest timestamp.

    Raises InsufficientOverlap with fewer than 3 matched samples and
    CollinearSamples when the matched geometry cannot pin the rotation.
    """
    est_points = np.asarray(est_points, dtype=float)
    ref_points = np.asarray(ref_points, dtype=float)
    ia, ib = match_by_time(est_times, ref_times, time_tolerance)
    if len(ia) < 3:
        raise InsufficientOverlap(f"only {len(ia)} common-time samples")
    _check_spread(est_points[ia])
    return _umeyama(est_points[ia], ref_points[ib])


def error_stats(aligned_est: np.ndarray, ref: np.ndarray,
                times: np.ndarray | None = None,
                similarity: SimilarityTransform | None = None) -> ErrorReport:
    """Per-sample distances plus mean / median / RMSE and the share of
    samples beyond 3x RMSE. RMSE is computed once over all samples."""
    d = np.linalg.norm(np.asarray(aligned_est, dtype=float)
                       - np.asarray(ref, dtype=float), axis=1)
    rmse = float(np.sqrt(np.mean(d ** 2)))
    n_out = int(np.sum(d > 3.0 * rmse))
    return ErrorReport(mean=float(d.mean()), rmse=rmse, median=float(np.median(d)),
                       outlier_pct=100.0 * n_out / len(d), distances=d,
                       times=None if times is None else np.asarray(times, dtype=float),
                       similarity=similarity)


def evaluate_trajectories(est_times: np.ndarray, est_points: np.ndarray,
                          ref_times: np.ndarray, ref_points: np.ndarray,
                          time_tolerance: float = TIME_TOLERANCE) -> ErrorReport:
    """Match by time, align by similarity, and report error statistics."""
    est_points = np.asarray(est_points, dtype=float)
    ref_points = np.asarray(ref_points, dtype=float)
    ia, ib = match_by_time(est_times, ref_times, time_tolerance)
    if len(ia) < 3:
        raise InsufficientOverlap(f"only {len(ia)} common-time samples")
    _check_spread(est_points[ia])
    sim = _umeyama(est_points[ia], ref_points[ib])
    return error_stats(sim.apply(est_points[ia]), ref_points[ib],
                       times=np.asarray(est_times, dtype=float)[ia], similarity=sim)
