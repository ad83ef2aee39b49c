"""Node runtime: hosts shard indices and answers protocol frames."""

import threading
import time
from contextlib import contextmanager
from enum import IntEnum

import numpy as np

from ..cache.tiers import DEFAULT_SPECS, TierCache
from ..exceptions import ProtocolError
from ..retrieval.pipeline import Shard
from .load import update_load
from .protocol import (Ack, ErrorCode, ErrorReply, Frame, HealthReply, InsertRequest,
                       LoadReport, MsgType, SearchReply, SearchRequest, decode_frame)


class Health(IntEnum):
    UP = 0
    SUSPECT = 1
    DOWN = 2


class ReadWriteLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writing or self._readers:
                self._cond.wait()
            self._writing = True
        try:
            yield
        finally:
            with self._cond:
                self._writing = False
                self._cond.notify_all()


class NodeRuntime:
    """Serves searches and inserts for the shards it hosts.

    Searches run concurrently with each other; an insert waits for them and
    holds the node exclusively, so there is a single writer per node. The
    embedding cache is updated under its own lock and only counts accesses.
    """

    def __init__(self, node_id, shards=None, alpha=0.9, cache_specs=DEFAULT_SPECS):
        self.node_id = int(node_id)
        self.shards = dict(shards or {})
        self.alpha = alpha
        self.load = 0.0
        self.in_flight = 0
        self.health = Health.UP
        self.cache = TierCache(cache_specs) if cache_specs else None
        self._rw = ReadWriteLock()
        self._state_lock = threading.Lock()
        self._cache_lock = threading.Lock()

    # -- lifecycle ----------------------------------------------------------
    def snapshot(self, shard_id):
        with self._rw.read():
            return self.shards[shard_id].to_bytes()

    def snapshots(self):
        return {sid: self.snapshot(sid) for sid in sorted(self.shards)}

    @classmethod
    def recover(cls, node_id, snapshots, **kwargs):
        """Rebuild a node from serialized shards; returns ``(node, seconds)``."""
        t0 = time.perf_counter()
        node = cls(node_id, {sid: Shard.from_bytes(b) for sid, b in snapshots.items()}, **kwargs)
        return node, time.perf_counter() - t0

    # -- request handling ---------------------------------------------------
    def _track(self, delta):
        with self._state_lock:
            self.in_flight += delta
            self.load = update_load(self.load, self.in_flight, self.alpha)

    def _touch_cache(self, doc_ids, level):
        if self.cache is None:
            return
        with self._cache_lock:
            for d in doc_ids:
                key = (int(d), level)
                if self.cache.get(key) is None:
                    self.cache.put(key, True)

    def search(self, req):
        shard = self.shards.get(req.shard)
        if shard is None:
            raise KeyError(f"node {self.node_id} does not host shard {req.shard}")
        if not 1 <= req.level <= shard.n_levels:
            raise ValueError(f"level {req.level} outside 1..{shard.n_levels}")
        with self._rw.read():
            res = shard.search(req.level, req.query, req.k, req.restrict)
        if req.restrict is not None:
            self._touch_cache(res.ids, req.level)
        return SearchReply(req.level, res.ids, res.scores, res.n_scored, res.n_centroids,
                           res.n_skipped)

    def insert(self, req):
        shard = self.shards.get(req.shard)
        if shard is None:
            raise KeyError(f"node {self.node_id} does not host shard {req.shard}")
        with self._rw.write():
            shard.insert(req.doc_id, [np.asarray(v, dtype=np.float32) for v in req.levels])
        return Ack(f"inserted {req.doc_id}")

    def load_report(self):
        stats = self.cache.snapshot() if self.cache is not None else None
        hits = tuple(stats.hits) if stats else (0, 0, 0)
        return LoadReport(self.node_id, self.load, self.in_flight, hits,
                          stats.misses if stats else 0)

    def handle(self, frame):
        """Answer one frame with exactly one frame carrying the same request id."""
        if isinstance(frame, (bytes, bytearray, memoryview)):
            try:
                frame = decode_frame(frame)
            except ProtocolError as exc:
                return Frame(MsgType.ERROR, 0, ErrorReply(ErrorCode.MALFORMED, str(exc)).encode())
        rid = frame.request_id
        self._track(+1)
        try:
            if frame.type == MsgType.SEARCH:
                reply = self.search(SearchRequest.decode(frame.payload))
                return Frame(MsgType.SEARCH_RESULT, rid, reply.encode())
            if frame.type == MsgType.INSERT:
                return Frame(MsgType.ACK, rid, self.insert(InsertRequest.decode(frame.payload)).encode())
            if frame.type == MsgType.HEALTH:
                return Frame(MsgType.HEALTH, rid, HealthReply(self.node_id, int(self.health)).encode())
            if frame.type == MsgType.LOAD_REPORT:
                return Frame(MsgType.LOAD_REPORT, rid, self.load_report().encode())
            return Frame(MsgType.ERROR, rid,
                         ErrorReply(ErrorCode.UNKNOWN_TYPE, f"unknown message type {frame.type}").encode())
        except ProtocolError as exc:
            return Frame(MsgType.ERROR, rid, ErrorReply(ErrorCode.MALFORMED, str(exc)).encode())
        except KeyError as exc:
            return Frame(MsgType.ERROR, rid, ErrorReply(ErrorCode.NOT_FOUND, str(exc)).encode())
        except ValueError as exc:
            return Frame(MsgType.ERROR, rid, ErrorReply(ErrorCode.REJECTED, str(exc)).encode())
        except Exception as exc:  # a handler bug must still produce a reply
            return Frame(MsgType.ERROR, rid, ErrorReply(ErrorCode.INTERNAL, repr(exc)).encode())
        finally:
            self._track(-1)
