"""Exception types raised by gradmerge."""


class GradMergeError(ValueError):
    """Base class; every domain error is also a ValueError."""


class ShapeError(GradMergeError):
    pass


class DivisibilityError(GradMergeError):
    pass


class RateError(GradMergeError):
    pass


class BoxError(GradMergeError):
    pass


class EmptyMaskError(GradMergeError):
    pass


class ZeroNormError(GradMergeError):
    pass


class PartitionError(GradMergeError):
    pass


class AsymmetryError(GradMergeError):
    pass


class LengthError(GradMergeError):
    pass


class SeparabilityError(GradMergeError):
    pass
