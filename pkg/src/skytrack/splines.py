"""Cubic B-spline curves over global time, in 2D (image tracks) and 3D
(world trajectory), with least-squares fitting, analytic derivatives, and a
piecewise trajectory container that tolerates gaps.

Knot vectors are clamped and uniform. Fitting is plain linear least squares
on the control points; regularization is left to bundle adjustment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import IllConditioned, InsufficientSamples, OutOfRange

DEGREE = 3
# Bursts separated by more than this many knot spacings start a new segment.
GAP_FACTOR = 2.0


def clamped_uniform_knots(t0: float, t1: float, knot_spacing: float) -> np.ndarray:
    """Clamped knot vector with spans as close to ``knot_spacing`` as an
    integer split of [t0, t1] allows (always at least one span)."""
    span = t1 - t0
    if span <= 0:
        raise ValueError("empty time interval")
    n_spans = max(1, int(round(span / knot_spacing)))
    grid = np.linspace(t0, t1, n_spans + 1)
    return np.concatenate([np.full(DEGREE, t0), grid, np.full(DEGREE, t1)])


def _derivative_map(knots: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Knots and the linear map D with c' = D c for the derivative spline."""
    n = len(knots) - degree - 1
    D = np.zeros((n - 1, n))
    for i in range(n - 1):
        dt = knots[i + degree + 1] - knots[i + 1]
        D[i, i] = -degree / dt
        D[i, i + 1] = degree / dt
    return knots[1:-1], D


def basis_matrix(knots: np.ndarray, times: np.ndarray, deriv: int = 0,
                 extrapolate: bool = False) -> np.ndarray:
    """Dense (len(times), n_coefficients) matrix of basis values (or basis
    derivative values) so that curve(times) = B @ coefficients.

    With ``extrapolate`` the end-span polynomials continue smoothly beyond
    the knot range (used by the optimizer when time-model updates nudge a
    detection just past its segment edge)."""
    times = np.asarray(times, dtype=float)
    kn, degree = knots, DEGREE
    maps = []
    for _ in range(deriv):
        kn, D = _derivative_map(kn, degree)
        maps.append(D)
        degree -= 1
    if extrapolate:
        t = times
    else:
        # Guard float noise at the interval edges; values must be inside.
        t = np.clip(times, kn[degree], kn[-degree - 1] if degree else kn[-1])
    B = BSpline.design_matrix(t, kn, degree, extrapolate=extrapolate).toarray()
    for D in reversed(maps):
        B = B @ D
    return B


@dataclass(frozen=True)
class PiecewiseSpline:
    """One clamped cubic B-spline curve over a closed time interval.

    coefficients has shape (n_basis, dim) with dim 2 or 3.
    """

    knots: np.ndarray
    coefficients: np.ndarray
    fit_rms: float = 0.0

    def __post_init__(self):
        kn = np.asarray(self.knots, dtype=float)
        co = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "knots", kn)
        object.__setattr__(self, "coefficients", co)
        if np.any(np.diff(kn) < 0):
            raise ValueError("knots must be non-decreasing")
        if len(kn) < 2 * (DEGREE + 1):
            raise ValueError("too few knots for a clamped cubic")
        if len(co) != len(kn) - DEGREE - 1:
            raise ValueError("coefficient count does not match knots")

    @property
    def dim(self) -> int:
        return self.coefficients.shape[1]

    @property
    def t_min(self) -> float:
        return float(self.knots[DEGREE])

    @property
    def t_max(self) -> float:
        return float(self.knots[-DEGREE - 1])

    @property
    def valid_interval(self) -> tuple[float, float]:
        return (self.t_min, self.t_max)

    def contains(self, t: float | np.ndarray, tol: float = 1e-9) -> bool | np.ndarray:
        t = np.asarray(t, dtype=float)
        inside = (t >= self.t_min - tol) & (t <= self.t_max + tol)
        return bool(inside) if inside.ndim == 0 else inside

    def _check_range(self, t: np.ndarray):
        if np.any(t < self.t_min - 1e-9) or np.any(t > self.t_max + 1e-9):
            raise OutOfRange(
                f"time outside spline interval [{self.t_min:.6g}, {self.t_max:.6g}]")

    def eval(self, t: float | np.ndarray) -> np.ndarray:
        """Curve position at global time t (scalar or array)."""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        self._check_range(ts)
        out = basis_matrix(self.knots, ts) @ self.coefficients
        return out[0] if np.ndim(t) == 0 else out

    def eval_derivative(self, t: float | np.ndarray, order: int = 1) -> np.ndarray:
        """Analytic first or second time derivative of the curve."""
        if order not in (1, 2):
            raise ValueError("only derivative orders 1 and 2 are supported")
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        self._check_range(ts)
        out = basis_matrix(self.knots, ts, deriv=order) @ self.coefficients
        return out[0] if np.ndim(t) == 0 else out

    def with_coefficients(self, coefficients: np.ndarray) -> "PiecewiseSpline":
        return PiecewiseSpline(self.knots, coefficients, self.fit_rms)


def fit_spline(times: np.ndarray, values: np.ndarray,
               knot_spacing: float) -> PiecewiseSpline:
    """Least-squares B-spline fit of (time, vector) samples.

    Requires at least 4 time-sorted samples with a positive span. Raises
    IllConditioned when a knot span contains no samples or the normal
    equations are rank deficient.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(times) < DEGREE + 1:
        raise InsufficientSamples(f"{len(times)} samples, need >= {DEGREE + 1}")
    if np.any(np.diff(times) < 0):
        raise ValueError("samples must be sorted by time")
    span = times[-1] - times[0]
    if span <= 0:
        raise InsufficientSamples("samples span zero time")
    knots = clamped_uniform_knots(times[0], times[-1], min(knot_spacing, span))

    interior = np.unique(knots)
    counts, _ = np.histogram(times, bins=interior)
    if np.any(counts == 0):
        empty = int(np.argmin(counts))
        raise IllConditioned(
            f"knot span [{interior[empty]:.6g}, {interior[empty + 1]:.6g}] "
            "has no supporting samples")

    B = basis_matrix(knots, times)
    coef, _, rank, _ = np.linalg.lstsq(B, values, rcond=None)
    if rank < B.shape[1]:
        raise IllConditioned(f"design matrix rank {rank} < {B.shape[1]}")
    rms = float(np.sqrt(np.mean(np.sum((B @ coef - values) ** 2, axis=1))))
    return PiecewiseSpline(knots, coef, fit_rms=rms)


@dataclass
class TrajectoryModel:
    """The 3D trajectory as time-ordered spline segments with honest gaps.

    Segments never overlap; time ranges nobody observed stay uncovered.
    Each segment keeps the samples that produced it so overlapping updates
    can refit from the pooled evidence. Samples too sparse or too short to
    support a fit wait in a buffer until later samples complete them.
    """

    knot_spacing: float = 5.0
    segments: list[PiecewiseSpline] = field(default_factory=list)
    segment_samples: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    buffer: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def gap_threshold(self) -> float:
        return GAP_FACTOR * self.knot_spacing

    @property
    def is_empty(self) -> bool:
        return not self.segments

    def covered_intervals(self) -> list[tuple[float, float]]:
        return [seg.valid_interval for seg in self.segments]

    def gaps(self) -> list[tuple[float, float]]:
        out = []
        for prev, nxt in zip(self.segments, self.segments[1:]):
            out.append((prev.t_max, nxt.t_min))
        return out

    @property
    def t_min(self) -> float:
        return self.segments[0].t_min

    @property
    def t_max(self) -> float:
        return self.segments[-1].t_max

    def coverage(self) -> float:
        """Total covered global time."""
        return sum(seg.t_max - seg.t_min for seg in self.segments)

    def segment_at(self, t: float) -> PiecewiseSpline | None:
        for seg in self.segments:
            if seg.contains(t):
                return seg
        return None

    def eval_many(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate at many times. Returns (points (n, 3), valid mask);
        times inside gaps or outside coverage are masked out, not errors."""
        times = np.asarray(times, dtype=float)
        points = np.full((len(times), 3), np.nan)
        valid = np.zeros(len(times), dtype=bool)
        for seg in self.segments:
            m = seg.contains(times)
            if np.any(m):
                points[m] = seg.eval(times[m])
                valid |= m
        return points, valid

    def extend_or_merge(self, new_times: np.ndarray,
                        new_values: np.ndarray) -> "TrajectoryModel":
        """Fold new (time, position) samples into the model.

        All evidence (existing segment samples, buffered leftovers, new
        samples) is pooled, clustered by time with the gap threshold, and
        each sufficiently long cluster is refit. Returns a new model.
        """
        new_times = np.asarray(new_times, dtype=float)
        new_values = np.asarray(new_values, dtype=float).reshape(-1, 3)
        if len(new_times) > 1 and np.any(np.diff(new_times) < 0):
            raise ValueError("new samples must be sorted by time")

        parts_t = [t for t, _ in self.segment_samples] + [new_times]
        parts_v = [v for _, v in self.segment_samples] + [new_values]
        if self.buffer is not None:
            parts_t.append(self.buffer[0])
            parts_v.append(self.buffer[1])
        all_t = np.concatenate(parts_t) if parts_t else np.empty(0)
        all_v = np.vstack(parts_v) if parts_v else np.empty((0, 3))
        order = np.argsort(all_t, kind="stable")
        all_t, all_v = all_t[order], all_v[order]

        model = TrajectoryModel(knot_spacing=self.knot_spacing)
        if len(all_t) == 0:
            return model

        splits = np.nonzero(np.diff(all_t) > self.gap_threshold)[0] + 1
        leftovers_t, leftovers_v = [], []
        for ct, cv in zip(np.split(all_t, splits), np.split(all_v, splits)):
            span = ct[-1] - ct[0]
            if len(ct) >= DEGREE + 1 and span >= self.knot_spacing:
                try:
                    seg = fit_spline(ct, cv, self.knot_spacing)
                except IllConditioned:
                    leftovers_t.append(ct)
                    leftovers_v.append(cv)
                    continue
                model.segments.append(seg)
                model.segment_samples.append((ct, cv))
            else:
                leftovers_t.append(ct)
                leftovers_v.append(cv)
        if leftovers_t:
            model.buffer = (np.concatenate(leftovers_t), np.vstack(leftovers_v))
        return model

    def with_segment_curves(self, curves: list[PiecewiseSpline]) -> "TrajectoryModel":
        """Swap in updated spline curves (e.g. after bundle adjustment),
        keeping knot structure and replacing stored samples with dense
        resamples of the new curves so later merges honor the update."""
        if len(curves) != len(self.segments):
            raise ValueError("segment count mismatch")
        model = TrajectoryModel(knot_spacing=self.knot_spacing,
                                segments=list(curves))
        step = min(1.0, self.knot_spacing / 4.0)
        for seg in curves:
            n = max(DEGREE + 1, int(np.ceil((seg.t_max - seg.t_min) / step)) + 1)
            ts = np.linspace(seg.t_min, seg.t_max, n)
            model.segment_samples.append((ts, seg.eval(ts)))
        model.buffer = self.buffer
        return model
