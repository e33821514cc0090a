"""Exception hierarchy shared by all radiantmap modules.

Every failure the library raises deliberately derives from RadiantMapError
so callers (and the CLI) can separate domain failures from programming
errors.  I/O failures are left as the builtin OSError family.
"""


class RadiantMapError(Exception):
    """Base class for all radiantmap domain errors."""


class InvalidArgumentError(RadiantMapError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateGeometryError(RadiantMapError):
    """Geometry has too little rank to support the requested operation
    (collinear point cloud, rank-deficient ICP covariance, zero-area polygon).
    """


class MissingCoverageError(RadiantMapError):
    """No cloud points qualify for a surface or feature temperature."""

    def __init__(self, region_id: str, message: str | None = None):
        self.region_id = region_id
        super().__init__(message or f"no qualifying points for region {region_id!r}")


class OutOfDomainError(RadiantMapError):
    """An evaluation point lies outside the valid domain of a scene."""


class IncompleteSceneError(RadiantMapError):
    """A region receives view-factor weight but has no temperature."""

    def __init__(self, region_id: str, message: str | None = None):
        self.region_id = region_id
        super().__init__(message or f"region {region_id!r} has positive view factor but no temperature")


class EnclosureLeakError(RadiantMapError):
    """A scene flagged as a closed enclosure let rays escape."""


class InconsistentGeometryError(RadiantMapError):
    """Feature view factors would drive a corrected envelope view factor below zero."""


class InsufficientOverlapError(RadiantMapError):
    """Too few surviving correspondences to estimate a rigid alignment."""


class EmptyFrameError(RadiantMapError):
    """A frame carries no valid depth measurement."""


class EmptyMapError(RadiantMapError):
    """A frame sequence produced no usable map points."""


class FrameProcessingError(RadiantMapError):
    """A per-frame fusion failure, annotated with the frame index."""

    def __init__(self, frame_index: int, cause: Exception):
        self.frame_index = frame_index
        self.cause = cause
        super().__init__(f"frame {frame_index}: {cause}")


class MissingFloorError(RadiantMapError):
    """The scene has no horizontal surface to anchor the evaluation grid."""


class SceneFormatError(RadiantMapError, ValueError):
    """A scene, cloud, or detections file does not match its documented schema."""
