"""Exception and warning types raised across the package."""

from sklearn.exceptions import NotFittedError


class DimensionMismatchError(ValueError):
    """An input vector or matrix has the wrong dimensionality."""

    def __init__(self, what, expected, got):
        super().__init__(f"{what}: expected dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


class ChecksumError(ValueError):
    """A serialized payload failed CRC32 verification."""


class FormatError(ValueError):
    """A serialized payload has a bad magic, version or layout."""


class TrainingDivergedWarning(RuntimeWarning):
    """Training produced a non-finite loss; the last finite parameters were kept."""


class ShardUnavailableError(RuntimeError):
    """A shard has no live replica left to serve it."""

    def __init__(self, shards):
        shards = sorted(shards)
        super().__init__(f"shard(s) unavailable, no live replica: {shards}")
        self.shards = shards


class QuorumError(RuntimeError):
    """Fewer nodes responded than the configured quorum."""


class ProtocolError(ValueError):
    """A wire frame could not be decoded."""


class NodeUnavailableError(ConnectionError):
    """A node could not be reached (down or disconnected)."""


__all__ = [
    "ChecksumError",
    "DimensionMismatchError",
    "FormatError",
    "NodeUnavailableError",
    "NotFittedError",
    "ProtocolError",
    "QuorumError",
    "ShardUnavailableError",
    "TrainingDivergedWarning",
]
