"""Exception types shared across the package."""

from __future__ import annotations


class GisplatError(Exception):
    """Base class for all package errors."""


class InvalidArgument(GisplatError, ValueError):
    pass


class BehindCamera(GisplatError, ValueError):
    pass


class NoImuData(GisplatError):
    """Raised when an IMU interval has no samples; callers fall back to constant velocity."""


class TrackingUnavailable(GisplatError):
    def __init__(self, message: str, frame_id: int | None = None):
        super().__init__(message if frame_id is None else f"frame {frame_id}: {message}")
        self.frame_id = frame_id


class InitFailed(GisplatError):
    pass


class AlignmentFailed(GisplatError):
    pass


class MetricUnavailable(GisplatError):
    pass


class UnreadableDataset(GisplatError):
    pass


class DatasetParseError(GisplatError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno
