"""Exception types shared across the package."""


class GuidedSegError(Exception):
    """Base class for all library errors."""


class ShapeError(GuidedSegError):
    """Operands have incompatible or malformed shapes."""


class LabelError(GuidedSegError):
    """A class label is outside the allowed range."""


class ContractError(GuidedSegError):
    """A caller violated an operation's precondition."""


class ConfigError(GuidedSegError):
    """A configuration is inconsistent or unsupported."""


class DegenerateSupportError(GuidedSegError):
    """The support lacks the annotations a head requires."""


class NoPositiveRegionError(GuidedSegError):
    """A binary target has no positive pixels to sample from."""


class DatasetTooSmallError(GuidedSegError):
    """The dataset cannot supply the requested episode."""


class TrainingDivergedError(GuidedSegError):
    """Loss became non-finite; message carries the failing episode and norms."""


class DatasetFormatError(GuidedSegError):
    """A dataset directory is missing files or malformed."""
