"""Typed errors raised across the loading pipeline.

The class name is the stable, machine-readable error identifier: the CLI
prints ``type(err).__name__`` on stderr and maps the base classes to exit
codes (format 1, I/O 2, collective 3).
"""


class AggloadError(Exception):
    """Base class for every error raised by this package."""


class FormatError(AggloadError):
    """A safetensors file (or tensor key set) violates the format contract."""


class TruncatedHeader(FormatError):
    pass


class HeaderTooLarge(FormatError):
    pass


class MalformedJson(FormatError):
    pass


class UnknownDType(FormatError):
    pass


class NegativeShape(FormatError):
    pass


class OffsetOutOfBounds(FormatError):
    pass


class SizeMismatch(FormatError):
    pass


class OverlappingTensors(FormatError):
    pass


class LengthMismatch(FormatError):
    pass


class DuplicateKey(FormatError):
    """The same tensor key appears in more than one mapped file."""


class IoError(AggloadError):
    """A file could not be read (or a transfer aborted mid-flight)."""


class DeviceError(AggloadError):
    """Device-memory allocation, transfer, or conversion failure."""


class OutOfMemory(DeviceError):
    pass


class MisalignedDirectTransfer(DeviceError):
    """Direct-transfer backend rejected a non-512-byte-aligned request."""


class BounceTooSmall(DeviceError):
    pass


class UnsupportedConversion(DeviceError):
    pass


class DoubleRelease(DeviceError):
    pass


class ViewError(AggloadError):
    """Tensor-view construction or element access failure."""


class MisalignedView(ViewError):
    pass


class OutOfBoundsView(ViewError):
    pass


class IndexOutOfRange(ViewError):
    pass


class UseAfterClose(ViewError):
    """The buffer backing this view was released."""


class CollectiveError(AggloadError):
    """Multi-rank rendezvous or sharding failure."""


class RendezvousTimeout(CollectiveError):
    """A rank failed to arrive at a collective call; signals an ordering bug."""


class SpecMismatch(CollectiveError):
    pass


class DimTooSmall(CollectiveError):
    pass


class BadDim(CollectiveError):
    pass


class LoaderError(AggloadError):
    """High-level loader API misuse."""


class UnknownKey(LoaderError):
    pass


class StaleKey(LoaderError):
    """The key was consumed, its buffer released, and no view survives."""


class EmptyFileList(LoaderError):
    pass


class UnknownNode(AggloadError):
    """Topology lookup for a node id that does not exist."""
