"""Exception hierarchy.

Validation errors (bad inputs, malformed files) derive from ``ValidationError``
and map to CLI exit code 1.  Numerical or tracking failures derive from
``RuntimeFailure`` and map to exit code 2.
"""


class CapslamError(Exception):
    pass


class ValidationError(CapslamError, ValueError):
    pass


class RuntimeFailure(CapslamError, RuntimeError):
    pass


# core geometry
class NonPositiveDisparity(ValidationError):
    pass


class NonPositiveDepth(ValidationError):
    pass


class BehindCamera(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidImage(ValidationError):
    pass


# keypoints
class WindowOutOfBounds(ValidationError):
    pass


class ImageTooSmall(ValidationError):
    pass


# autodiff
class ShapeMismatch(ValidationError):
    pass


class NonFiniteValue(RuntimeFailure):
    pass


class NonScalarLoss(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


# capsnet
class NonFiniteLoss(RuntimeFailure):
    pass


# pose estimation
class NoValidPixels(RuntimeFailure):
    pass


class Diverged(RuntimeFailure):
    pass


class NonPositiveDelta(ValidationError):
    pass


class EmptyKeyframeSet(ValidationError):
    pass


# ekf
class NonPositiveDt(ValidationError):
    pass


class SingularInnovationCovariance(RuntimeFailure):
    pass


class NonMonotonicTimestamps(ValidationError):
    pass


# mapping
class EmptyMap(ValidationError):
    pass


# dataset / evaluation
class MissingIntrinsics(ValidationError):
    pass


class MissingTimestamps(ValidationError):
    pass


class MissingImageFile(ValidationError):
    pass


class InsufficientOverlap(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class TrackingLost(RuntimeFailure):
    def __init__(self, frame_id, reason=""):
        super().__init__(f"tracking lost at frame {frame_id}: {reason}")
        self.frame_id = frame_id
        self.reason = reason
