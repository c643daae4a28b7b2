"""Per-camera time models and detection tracks.

Global time is measured in frames of the anchor camera. A camera's frame j
maps to global time alpha * j + beta; with a rolling shutter the row index
adds r * row on top, where r is the readout speed in global frame units per
image row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TimeModel:
    """Affine frame-to-global-time map plus rolling-shutter readout speed.

    alpha: global frame units per local frame (> 0)
    beta: global frame units offset
    rs_readout: global frame units per image row (0 for global shutter;
        may be negative for bottom-to-top readout)
    """

    alpha: float = 1.0
    beta: float = 0.0
    rs_readout: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def with_shift(self, delta_beta: float) -> "TimeModel":
        return TimeModel(self.alpha, self.beta + delta_beta, self.rs_readout)

    def reanchored(self, anchor: "TimeModel") -> "TimeModel":
        """Express this model in the timeline where ``anchor`` becomes the
        identity map (alpha 1, beta 0). Exact affine reparameterization."""
        return TimeModel(self.alpha / anchor.alpha,
                         (self.beta - anchor.beta) / anchor.alpha,
                         self.rs_readout / anchor.alpha)


def frame_to_time(tm: TimeModel, frame: float | np.ndarray) -> float | np.ndarray:
    """Global time of frame index j: alpha * j + beta."""
    return tm.alpha * np.asarray(frame, dtype=float) + tm.beta


def detection_time(tm: TimeModel, frame: float | np.ndarray,
                   row: float | np.ndarray) -> float | np.ndarray:
    """Global exposure time of a detection including the rolling-shutter
    row delay: alpha * j + beta + r * row."""
    return (tm.alpha * np.asarray(frame, dtype=float) + tm.beta
            + tm.rs_readout * np.asarray(row, dtype=float))


@dataclass(frozen=True)
class Detection2D:
    """One observed image position of the target."""

    camera_id: int
    frame_index: int
    pixel: np.ndarray        # (x1, x2); x2 is the row index
    normalized: np.ndarray   # undistorted calibrated coordinates


@dataclass
class DetectionTrack:
    """All detections of one camera, stored columnwise for vectorized use.

    frame_index is strictly increasing; pixels and normalized are (n, 2)
    arrays aligned with it.
    """

    camera_id: int
    frame_index: np.ndarray
    pixels: np.ndarray
    normalized: np.ndarray

    def __post_init__(self):
        self.frame_index = np.asarray(self.frame_index, dtype=int)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.normalized = np.asarray(self.normalized, dtype=float).reshape(-1, 2)
        if len(self.frame_index) != len(self.pixels) or len(self.pixels) != len(self.normalized):
            raise ValueError("track columns must have equal length")
        if len(self.frame_index) > 1 and not np.all(np.diff(self.frame_index) > 0):
            raise ValueError("frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frame_index)

    def detection(self, i: int) -> Detection2D:
        return Detection2D(self.camera_id, int(self.frame_index[i]),
                           self.pixels[i], self.normalized[i])

    def times(self, tm: TimeModel) -> np.ndarray:
        """Global frame-start times of all detections (no RS row term)."""
        return frame_to_time(tm, self.frame_index)

    def exposure_times(self, tm: TimeModel) -> np.ndarray:
        """Global exposure times including the RS row delay."""
        return detection_time(tm, self.frame_index, self.pixels[:, 1])

    def subset(self, mask: np.ndarray) -> "DetectionTrack":
        return DetectionTrack(self.camera_id, self.frame_index[mask],
                              self.pixels[mask], self.normalized[mask])
