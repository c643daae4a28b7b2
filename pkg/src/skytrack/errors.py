"""Exception hierarchy for the skytrack package.

Every failure mode that callers are expected to handle gets its own class;
all of them derive from SkytrackError so a caller can catch the whole family.
"""


class SkytrackError(Exception):
    """Base class for all skytrack errors."""


# -- geometry ---------------------------------------------------------------

class CheiralityViolation(SkytrackError):
    """A 3D point lies behind the camera it is being projected into."""


class DistortionDivergence(SkytrackError):
    """Iterative undistortion failed to converge (pixel outside the
    calibrated domain)."""


class DegenerateEssential(SkytrackError):
    """No essential-matrix decomposition places the points in front of
    both cameras."""


# -- splines ----------------------------------------------------------------

class InsufficientSamples(SkytrackError):
    """Too few samples for a spline fit."""


class IllConditioned(SkytrackError):
    """A knot span has no supporting samples; the fit would be singular."""


class OutOfRange(SkytrackError):
    """Evaluation time outside the valid interval of a spline segment."""


# -- robust estimation ------------------------------------------------------

class InsufficientMatches(SkytrackError):
    """Fewer matches than the minimal sample size of the solver."""


class NoConsensus(SkytrackError):
    """RANSAC found no model with an acceptable inlier ratio."""


class DegenerateMotion(SkytrackError):
    """The observed 2D trajectory is too close to a straight line to
    constrain two-view geometry."""


class ParallelRays(SkytrackError):
    """Triangulation rays are parallel or camera centers coincide."""


class BehindCamera(SkytrackError):
    """Triangulated point fails the cheirality check."""


# -- pipeline ---------------------------------------------------------------

class NotEnoughOverlap(SkytrackError):
    """No camera pair produced a usable two-view geometry."""


class NoRegistrableCamera(SkytrackError):
    """No unregistered camera has enough matches against the current
    trajectory."""


# -- bundle adjustment ------------------------------------------------------

class RankDeficient(SkytrackError):
    """A parameter block has no supporting residuals; the problem is
    under-constrained."""


# -- evaluation -------------------------------------------------------------

class InsufficientOverlap(SkytrackError):
    """Too few common-time samples between the two trajectories."""


class CollinearSamples(SkytrackError):
    """Alignment samples are collinear; similarity is not unique."""


# -- synthetic scenes -------------------------------------------------------

class FixedPointDivergence(SkytrackError):
    """Rolling-shutter row fixed point did not converge (image motion too
    fast for the readout model)."""


# -- input/output -----------------------------------------------------------

class ParseError(SkytrackError):
    """Malformed input file; message carries file, line, and column."""

    def __init__(self, message, path=None, line=None, column=None):
        loc = ""
        if path is not None:
            loc += f"{path}:"
        if line is not None:
            loc += f"{line}:"
        if column is not None:
            loc += f"{column}:"
        super().__init__(f"{loc} {message}" if loc else message)
        self.path = path
        self.line = line
        self.column = column


class DuplicateFrame(ParseError):
    """A track file repeats a frame index."""


class MissingIntrinsics(SkytrackError):
    """A camera referenced by the manifest has no intrinsics file."""


class ExportError(SkytrackError):
    """Result files could not be written."""
