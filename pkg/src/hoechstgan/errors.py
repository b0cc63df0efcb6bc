"""Exception types shared across the package."""


class HoechstganError(Exception):
    """Base class for all package-specific errors."""


class DegenerateSamples(HoechstganError):
    """Too few samples, or zero variance, for intensity model fitting."""


class SlideTooSmall(HoechstganError):
    """Slide dimensions cannot accommodate a single patch."""


class EmptyDataset(HoechstganError):
    """An operation received a dataset with no usable items."""


class InvalidLabels(HoechstganError):
    """A labeled mask contains values outside the expected label set."""


class MissingPrerequisite(HoechstganError):
    """An operation requires a result that has not been computed yet."""


class PlacementFailure(HoechstganError):
    """Could not place the requested number of synthetic cells."""


class SpecMismatch(HoechstganError):
    """Network specification fields are inconsistent with each other."""


class ShapeMismatch(HoechstganError):
    """Tensor or array shapes are incompatible with the operation."""


class NotMutual(HoechstganError):
    """The second-target path was requested from a generator built without it."""


class UnknownVariant(HoechstganError):
    """Unrecognized model variant name."""


class ModeMismatch(HoechstganError):
    """Loss or wiring requested under the wrong discriminator mode."""


class NonFiniteLoss(HoechstganError):
    """A training loss evaluated to NaN or infinity."""


class ResumeMismatch(HoechstganError):
    """Checkpoint is incompatible with the requested configuration."""


class EmptyMask(HoechstganError):
    """A mask selects no pixels."""


class FullMask(HoechstganError):
    """A mask selects every pixel, leaving no outside region."""


class DegenerateReal(HoechstganError):
    """Reference image carries no usable signal for a relative ratio."""


class AllExcluded(HoechstganError):
    """Every record in an aggregation group was excluded."""
