"""Scatter-gather coordinator over a partitioned, replicated cluster."""

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..exceptions import NodeUnavailableError, ProtocolError, QuorumError, ShardUnavailableError
from ..retrieval.pipeline import Gathered
from .load import LoadTracker
from .node import Health
from .protocol import (ErrorReply, Frame, InsertRequest, MsgType, SearchReply, SearchRequest)


class Coordinator:
    """Routes each shard request to one live host and merges the replies.

    Implements the searcher interface used by :func:`~spi.retrieval.pipeline.retrieve`
    (``n_partitions``, ``dims``, ``search_level``). Per round, each shard
    goes to the least-loaded live host; a host that is unreachable is marked
    Down and the next replica is tried, one that times out or answers with a
    malformed or error frame is marked Suspect and likewise skipped.

    A shard whose hosts are all Down raises :class:`ShardUnavailableError`.
    Shards lost only to timeouts land in the miss list, and the round fails
    with :class:`QuorumError` when fewer than ``quorum`` nodes are healthy.
    ``quorum`` defaults to all nodes but one.
    """

    def __init__(self, pmap, transport, dims, quorum=None, timeout=2.0, alpha=0.9,
                 parallel=False, max_workers=None):
        self.pmap = pmap
        self.transport = transport
        self.dims = tuple(dims)
        n = pmap.n_nodes
        self.quorum = max(1, n - 1) if quorum is None else int(quorum)
        if not 1 <= self.quorum <= n:
            raise ValueError(f"quorum must lie in 1..{n}")
        self.timeout = timeout
        self.tracker = LoadTracker(n, alpha)
        self.health = {i: Health.UP for i in range(n)}
        self.parallel = parallel
        self._pool = ThreadPoolExecutor(max_workers or n) if parallel else None
        self._rid = itertools.count(1)
        self._lock = threading.Lock()

    @property
    def n_partitions(self):
        return self.pmap.n_nodes

    # -- membership ----------------------------------------------------------
    def mark(self, node, health):
        with self._lock:
            self.health[node] = Health(health)

    def failover(self, node):
        """Take ``node`` out of routing; returns shards it leaves without a live host."""
        self.mark(node, Health.DOWN)
        return [s for s in self.pmap.shards_on(node) if not self.live_hosts(s)]

    def live_hosts(self, shard):
        return [h for h in self.pmap.hosts(shard) if self.health[h] != Health.DOWN]

    def unavailable_shards(self):
        return [s for s in range(self.pmap.n_nodes) if not self.live_hosts(s)]

    def on_heartbeat(self, node, state):
        self.mark(node, {"up": Health.UP, "suspect": Health.SUSPECT, "down": Health.DOWN}[state])

    # -- dispatch --------------------------------------------------------------
    def _call(self, node, frame):
        self.tracker.begin(node)
        try:
            return self.transport.call(node, frame, timeout=self.timeout)
        finally:
            self.tracker.end(node)

    def _serve_shard(self, shard, make_frame, decode):
        """Try the shard's live hosts in load order.

        Returns ``(node, reply, failures)`` where ``node`` is None if no host
        answered and ``failures`` maps node ids to the health they earned.
        """
        failures = {}
        candidates = [h for h in self.live_hosts(shard)]
        # Suspect nodes are tried last
        while candidates:
            healthy = [h for h in candidates if self.health[h] == Health.UP] or candidates
            node = self.tracker.choose(healthy)
            candidates.remove(node)
            try:
                reply = self._call(node, make_frame())
                if reply.type == MsgType.ERROR:
                    err = ErrorReply.decode(reply.payload)
                    raise ProtocolError(f"node {node} error {err.code}: {err.message}")
                return node, decode(reply), failures
            except NodeUnavailableError:
                failures[node] = Health.DOWN
                self.mark(node, Health.DOWN)
            except (TimeoutError, ProtocolError):
                failures[node] = Health.SUSPECT
                self.mark(node, Health.SUSPECT)
        return None, None, failures

    def _scatter(self, shards, make_frame, decode):
        if self._pool is not None and len(shards) > 1:
            futs = {s: self._pool.submit(self._serve_shard, s, lambda s=s: make_frame(s), decode)
                    for s in shards}
            return {s: futs[s].result() for s in shards}
        return {s: self._serve_shard(s, lambda s=s: make_frame(s), decode) for s in shards}

    def _check_round(self, outcomes):
        unavailable = [s for s, (node, _, _) in outcomes.items()
                       if node is None and not self.live_hosts(s)]
        if unavailable:
            raise ShardUnavailableError(unavailable)
        failed = {n for n, h in self.health.items() if h == Health.DOWN}
        for _, _, fails in outcomes.values():
            failed.update(fails)
        healthy = self.pmap.n_nodes - len(failed)
        if healthy < self.quorum:
            raise QuorumError(f"{healthy} healthy node(s), quorum is {self.quorum}")

    def search_level(self, level, query, per_node_k, restrict=None, shards=None):
        """One scatter-gather round over every shard (or just ``shards``)."""
        query = np.asarray(query, dtype=np.float64)
        if restrict is None:
            groups = {s: None for s in range(self.pmap.n_nodes)}
        else:
            groups = {s: np.asarray(ids, dtype=np.int64)
                      for s, ids in sorted(self.pmap.split(restrict).items())}
        if shards is not None:
            groups = {s: v for s, v in groups.items() if s in set(shards)}
        if not groups:
            return Gathered([], {}, [], [])

        def make_frame(shard):
            req = SearchRequest(shard, level, int(per_node_k), query, groups[shard])
            return Frame(MsgType.SEARCH, next(self._rid), req.encode())

        def decode(reply):
            if reply.type != MsgType.SEARCH_RESULT:
                raise ProtocolError(f"expected a search result, got type {reply.type}")
            return SearchReply.decode(reply.payload)

        outcomes = self._scatter(sorted(groups), make_frame, decode)
        self._check_round(outcomes)
        partials, counts, missing, served = [], {}, [], []
        for shard in sorted(outcomes):
            node, rep, _ = outcomes[shard]
            if node is None:
                missing.append(shard)
                continue
            partials.append(rep)
            served.append(shard)
            counts[node] = counts.get(node, 0) + len(rep.ids)
        return Gathered(partials, counts, missing, served)

    def insert(self, doc_id, level_vectors):
        """Write one encoded doc to every live host of its LSH shard; returns the shard."""
        doc_id = int(doc_id)
        levels = [np.asarray(v, dtype=np.float32) for v in level_vectors]
        shard = int(self.pmap.assign(levels[0][None, :])[0])
        hosts = self.live_hosts(shard)
        if not hosts:
            raise ShardUnavailableError([shard])
        payload = InsertRequest(shard, doc_id, levels).encode()
        acked = 0
        for node in hosts:
            try:
                reply = self._call(node, Frame(MsgType.INSERT, next(self._rid), payload))
            except NodeUnavailableError:
                self.mark(node, Health.DOWN)
                continue
            except TimeoutError:
                self.mark(node, Health.SUSPECT)
                continue
            if reply.type == MsgType.ERROR:
                err = ErrorReply.decode(reply.payload)
                raise ValueError(f"insert of {doc_id} rejected by node {node}: {err.message}")
            acked += 1
        if not acked:
            raise ShardUnavailableError([shard])
        self.pmap.add(doc_id, shard)
        return shard

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
