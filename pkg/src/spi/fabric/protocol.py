"""Length-prefixed binary frames and their versioned payloads.

Frame layout (little-endian)::

    u32 length      bytes after this field (= 9 + payload size)
    u8  type
    u64 request id
    ...  payload    first byte is the payload version
"""

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from ..exceptions import ProtocolError

HEADER = struct.Struct("<IBQ")
PAYLOAD_VERSION = 1
MAX_FRAME = 1 << 30


class MsgType(IntEnum):
    SEARCH = 1
    SEARCH_RESULT = 2
    INSERT = 3
    ACK = 4
    HEALTH = 5
    LOAD_REPORT = 6
    ERROR = 7


class ErrorCode(IntEnum):
    UNKNOWN_TYPE = 1
    MALFORMED = 2
    NOT_FOUND = 3
    REJECTED = 4
    UNAVAILABLE = 5
    INTERNAL = 6


@dataclass
class Frame:
    type: int
    request_id: int
    payload: bytes = b""

    def encode(self):
        return HEADER.pack(9 + len(self.payload), int(self.type), self.request_id) + self.payload


def decode_frame(data):
    """Decode exactly one frame from ``data``."""
    if len(data) < HEADER.size:
        raise ProtocolError("frame shorter than its header")
    length, mtype, rid = HEADER.unpack_from(data)
    if length < 9 or length + 4 != len(data):
        raise ProtocolError(f"length field {length} disagrees with {len(data)} received bytes")
    return Frame(mtype, rid, bytes(data[HEADER.size:]))


def read_frame(read_exact):
    """Read one frame with ``read_exact(n) -> bytes``; returns None on clean EOF."""
    head = read_exact(4)
    if not head:
        return None
    (length,) = struct.unpack("<I", head)
    if length < 9 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    body = read_exact(length)
    if len(body) != length:
        raise ProtocolError("connection closed mid-frame")
    return decode_frame(head + body)


# -- payload codec ---------------------------------------------------------
class _Out:
    def __init__(self):
        self.parts = [struct.pack("<B", PAYLOAD_VERSION)]

    def pack(self, fmt, *v):
        self.parts.append(struct.pack("<" + fmt, *v))
        return self

    def array(self, a, dtype):
        a = np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<"))
        self.parts.append(struct.pack("<I", a.size))
        self.parts.append(a.tobytes())
        return self

    def text(self, s):
        b = s.encode("utf-8")
        self.parts.append(struct.pack("<H", len(b)) + b)
        return self

    def bytes(self):
        return b"".join(self.parts)


class _In:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0
        (version,) = self.unpack("B")
        if version != PAYLOAD_VERSION:
            raise ProtocolError(f"unsupported payload version {version}")

    def unpack(self, fmt):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ProtocolError("truncated payload")
        v = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return v

    def array(self, dtype):
        (n,) = self.unpack("I")
        dt = np.dtype(dtype).newbyteorder("<")
        size = n * dt.itemsize
        if self.pos + size > len(self.data):
            raise ProtocolError("truncated array")
        a = np.frombuffer(self.data, dtype=dt, count=n, offset=self.pos).astype(np.dtype(dtype))
        self.pos += size
        return a

    def text(self):
        (n,) = self.unpack("H")
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated text")
        s = bytes(self.data[self.pos:self.pos + n]).decode("utf-8")
        self.pos += n
        return s

    def done(self):
        if self.pos != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.pos} trailing payload bytes")


@dataclass
class SearchRequest:
    shard: int
    level: int
    k: int
    query: np.ndarray
    restrict: np.ndarray | None = None

    def encode(self):
        out = _Out().pack("IHI", self.shard, self.level, self.k).array(self.query, "f8")
        out.pack("B", self.restrict is not None)
        if self.restrict is not None:
            out.array(self.restrict, "i8")
        return out.bytes()

    @classmethod
    def decode(cls, data):
        r = _In(data)
        shard, level, k = r.unpack("IHI")
        q = r.array("f8")
        (has,) = r.unpack("B")
        restrict = r.array("i8") if has else None
        r.done()
        return cls(shard, level, k, q, restrict)


@dataclass
class SearchReply:
    level: int
    ids: np.ndarray
    scores: np.ndarray
    n_scored: int = 0
    n_centroids: int = 0
    n_skipped: int = 0

    def encode(self):
        return (_Out().pack("H", self.level).array(self.ids, "i8").array(self.scores, "f8")
                .pack("QQI", self.n_scored, self.n_centroids, self.n_skipped).bytes())

    @classmethod
    def decode(cls, data):
        r = _In(data)
        (level,) = r.unpack("H")
        ids = r.array("i8")
        scores = r.array("f8")
        n_scored, n_centroids, n_skipped = r.unpack("QQI")
        r.done()
        if ids.shape != scores.shape:
            raise ProtocolError("ids and scores differ in length")
        return cls(level, ids, scores, n_scored, n_centroids, n_skipped)


@dataclass
class InsertRequest:
    shard: int
    doc_id: int
    levels: list = field(default_factory=list)

    def encode(self):
        out = _Out().pack("IqH", self.shard, self.doc_id, len(self.levels))
        for v in self.levels:
            out.array(v, "f4")
        return out.bytes()

    @classmethod
    def decode(cls, data):
        r = _In(data)
        shard, doc_id, n = r.unpack("IqH")
        levels = [r.array("f4") for _ in range(n)]
        r.done()
        return cls(shard, doc_id, levels)


@dataclass
class Ack:
    message: str = ""

    def encode(self):
        return _Out().text(self.message).bytes()

    @classmethod
    def decode(cls, data):
        r = _In(data)
        msg = r.text()
        r.done()
        return cls(msg)


@dataclass
class HealthReply:
    node_id: int
    status: int  # 0 Up, 1 Suspect, 2 Down

    def encode(self):
        return _Out().pack("IB", self.node_id, self.status).bytes()

    @classmethod
    def decode(cls, data):
        r = _In(data)
        node_id, status = r.unpack("IB")
        r.done()
        return cls(node_id, status)


@dataclass
class LoadReport:
    node_id: int
    load: float
    in_flight: int
    cache_hits: tuple = (0, 0, 0)
    cache_misses: int = 0

    def encode(self):
        return (_Out().pack("IdI", self.node_id, self.load, self.in_flight)
                .pack("QQQQ", *self.cache_hits, self.cache_misses).bytes())

    @classmethod
    def decode(cls, data):
        r = _In(data)
        node_id, load, in_flight = r.unpack("IdI")
        h1, h2, h3, miss = r.unpack("QQQQ")
        r.done()
        return cls(node_id, load, in_flight, (h1, h2, h3), miss)


@dataclass
class ErrorReply:
    code: int
    message: str = ""

    def encode(self):
        return _Out().pack("H", self.code).text(self.message).bytes()

    @classmethod
    def decode(cls, data):
        r = _In(data)
        (code,) = r.unpack("H")
        msg = r.text()
        r.done()
        return cls(code, msg)


def empty_payload():
    return _Out().bytes()
