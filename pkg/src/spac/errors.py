"""Exception types shared across the codec."""


class SpacError(Exception):
    """Base class for all codec errors."""


class MalformedPly(SpacError):
    """PLY header or payload does not parse."""


class MissingAttribute(SpacError):
    """PLY lacks a required vertex property."""


class DuplicatePoints(SpacError):
    """Input contains repeated voxel coordinates."""


class CoordinateRange(SpacError):
    """Coordinate outside the [0, 2^bitdepth) grid."""


class ColorspaceMismatch(SpacError):
    """Operation applied to a cloud in the wrong color space."""


class GeometryMismatch(SpacError):
    """Two clouds do not share the same coordinate set."""


class NotAPartition(SpacError):
    """Membership masks do not partition the geometry."""


class TruncatedStream(SpacError):
    """Bitstream ends before the requested layer's chunk."""


class CorruptStream(SpacError):
    """Bitstream framing or header is inconsistent."""


class ChecksumMismatch(SpacError):
    """Stored hash does not match the data it covers."""
