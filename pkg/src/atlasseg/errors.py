"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: input problems -> 2,
configuration problems -> 3, method failures -> 1.
"""


class AtlasSegError(Exception):
    """Base class for all package errors."""


class InputError(AtlasSegError):
    """Invalid input values (non-finite coordinates, bad arguments)."""


class ShapeError(AtlasSegError):
    """Mismatched grids or array shapes."""


class ResolutionError(AtlasSegError):
    """Operation needs a different resolution (e.g. even dimensions)."""


class ConfigurationError(AtlasSegError):
    """Inconsistent configuration (bad schedule, n > bank size, ...)."""


class EmptyRegionError(AtlasSegError):
    """A region average was requested over an empty pixel set."""


class SegmentationFailureError(AtlasSegError):
    """No usable registration survived; segmentation cannot proceed."""


class BundleFormatError(AtlasSegError):
    """Base class for subject-bundle parse errors."""


class MalformedHeaderError(BundleFormatError):
    """meta.json missing, unreadable, or lacking required fields."""


class TruncatedPayloadError(BundleFormatError):
    """A raw array file is shorter or longer than the header declares."""


class ChecksumError(BundleFormatError):
    """CRC32 recorded in the header does not match the payload."""


class VersionError(BundleFormatError):
    """Unknown bundle format version."""
