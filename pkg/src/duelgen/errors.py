"""Exception types shared across the toolkit.

The CLI maps ``DuelgenError`` (bad inputs, bad configs) to exit code 2 and
anything else (broken internal invariants) to exit code 3, so raising the
right class here is part of the external contract.
"""


class DuelgenError(Exception):
    """Base class for all user-facing errors raised by this package."""


class ParseError(DuelgenError):
    """Input document is not valid JSON / not decodable."""


class SchemaError(DuelgenError):
    """Input decodes but violates the documented schema."""


class ShapeError(DuelgenError):
    """Array arguments have inconsistent or unsupported shapes."""


class ArityError(DuelgenError):
    """Wrong number of inputs (e.g. reference images)."""


class ParameterError(DuelgenError):
    """Scalar argument outside its documented range."""


class ResolutionError(DuelgenError):
    """Requested resolution does not divide the base resolution."""


class EmptyPoseError(DuelgenError):
    """A pose with no confidently visible keypoints where one is required."""


class DegeneratePoseError(DuelgenError):
    """Pose has zero spatial spread on an axis; scale factors undefined."""


class SamplingError(DuelgenError):
    """A dataset entry cannot produce the requested training sample."""


class DataError(DuelgenError):
    """Dataset source empty or inconsistent with its manifest."""


class PolicyError(DuelgenError):
    """Freeze policy references unknown parameter names."""


class CheckpointError(DuelgenError):
    """Checkpoint archive missing, malformed, or incompatible."""


class TrainingDiverged(DuelgenError):
    """Loss exceeded the divergence guard for too many consecutive steps."""
