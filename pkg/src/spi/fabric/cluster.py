"""Assembling partitioned clusters, in-process or over sockets."""

import time

import numpy as np

from .._validation import check_ids
from ..cache.tiers import DEFAULT_SPECS
from ..retrieval.pipeline import DEFAULT_COARSE, DEFAULT_REFINE, Shard, retrieve
from .coordinator import Coordinator
from .node import Health, NodeRuntime
from .partition import partition
from .transport import HeartbeatMonitor, LatencyModel, LocalTransport, NodeServer, SocketTransport


def build_shards(levels, ids, pmap, coarse=DEFAULT_COARSE, refine=DEFAULT_REFINE, seed=0):
    """One :class:`Shard` per partition, built from the docs the map assigns to it."""
    ids = np.asarray(ids, dtype=np.int64)
    shards = []
    for s in range(pmap.n_nodes):
        mask = pmap.primary == s
        shards.append(Shard.build(s, [lv[mask] for lv in levels], ids[mask], coarse, refine, seed))
    return shards


def place_replicas(shards, pmap, alpha=0.9, cache_specs=DEFAULT_SPECS):
    """Node runtimes; each replica is an independent copy restored from the primary's bytes.

    ``cache_specs=None`` runs the nodes without an embedding cache.
    """
    nodes = {}
    for node in range(pmap.n_nodes):
        hosted = {}
        for s in pmap.shards_on(node):
            hosted[s] = shards[s] if node == s else Shard.from_bytes(shards[s].to_bytes())
        nodes[node] = NodeRuntime(node, hosted, alpha=alpha, cache_specs=cache_specs)
    return nodes


class Cluster:
    """Handle on a running cluster: its nodes, transport, partition map and coordinator."""

    def __init__(self, pmap, nodes, transport, coordinator, servers=None, monitor=None):
        self.pmap = pmap
        self.nodes = nodes
        self.transport = transport
        self.coordinator = coordinator
        self.servers = servers or {}
        self.monitor = monitor

    @property
    def n_nodes(self):
        return self.pmap.n_nodes

    def retrieve(self, query, encoder, planner, k=10, plan=None):
        return retrieve(query, encoder, planner, self.coordinator, k, plan)

    def insert(self, doc_id, level_vectors):
        return self.coordinator.insert(doc_id, level_vectors)

    def kill(self, node):
        """Fail ``node`` abruptly. Routing learns about it on the next failed call."""
        if self.servers:
            self.servers.pop(node).stop()
        else:
            self.transport.kill(node)

    def stall(self, node):
        self.transport.stall(node)

    def recover(self, node):
        """Restore ``node`` from snapshots of its shards taken on live replicas.

        Returns the wall time of the restore in seconds.
        """
        snaps = {}
        for s in self.pmap.shards_on(node):
            donors = [h for h in self.coordinator.live_hosts(s) if h != node]
            if not donors:
                raise RuntimeError(f"shard {s} has no live replica to recover from")
            snaps[s] = self.nodes[donors[0]].snapshot(s)
        t0 = time.perf_counter()
        old = self.nodes[node]
        specs = old.cache.specs if old.cache is not None else None
        runtime, _ = NodeRuntime.recover(node, snaps, alpha=old.alpha, cache_specs=specs)
        self.nodes[node] = runtime
        if self.servers or isinstance(self.transport, SocketTransport):
            srv = NodeServer(runtime, port=0).start()
            self.servers[node] = srv
            self.transport.addresses[node] = srv.address
            self.transport._pools[node] = []
        else:
            self.transport.revive(node, runtime)
        self.coordinator.mark(node, Health.UP)
        return time.perf_counter() - t0

    def nbytes(self):
        return sum(s.nbytes() for n in self.nodes.values() for s in n.shards.values())

    def close(self):
        if self.monitor is not None:
            self.monitor.stop()
        for srv in self.servers.values():
            srv.stop()
        self.servers = {}
        if isinstance(self.transport, SocketTransport):
            self.transport.close()
        self.coordinator.close()


def build_cluster(levels, ids=None, n_nodes=4, replication=None, coarse=DEFAULT_COARSE,
                  refine=DEFAULT_REFINE, seed=0, n_planes=16, quorum=None, alpha=0.9,
                  latency=LatencyModel(), realtime=False, sockets=False, timeout=2.0,
                  heartbeat=None, cache_specs=DEFAULT_SPECS):
    """Partition encoded ``levels`` over ``n_nodes`` and start a cluster.

    ``sockets=True`` serves every node on a localhost TCP port; ``heartbeat``
    (seconds) then starts a monitor that marks nodes Down after three misses.
    Otherwise frames travel through a :class:`LocalTransport` with simulated
    latency. ``replication`` defaults to two copies (one on a single node).
    """
    ids = check_ids(ids, levels[0].shape[0])
    if replication is None:
        replication = min(2, n_nodes)
    pmap = partition(levels[0], n_nodes, replication, n_planes, seed, ids)
    shards = build_shards(levels, ids, pmap, coarse, refine, seed)
    nodes = place_replicas(shards, pmap, alpha, cache_specs)
    dims = tuple(lv.shape[1] for lv in levels)
    servers, monitor = {}, None
    if sockets:
        servers = {n: NodeServer(rt).start() for n, rt in nodes.items()}
        transport = SocketTransport({n: s.address for n, s in servers.items()})
        coord = Coordinator(pmap, transport, dims, quorum, timeout, alpha, parallel=True)
        if heartbeat:
            monitor = HeartbeatMonitor(transport, list(nodes), coord.on_heartbeat,
                                       interval=heartbeat).start()
    else:
        transport = LocalTransport(nodes, latency, realtime)
        coord = Coordinator(pmap, transport, dims, quorum, timeout, alpha)
    return Cluster(pmap, nodes, transport, coord, servers, monitor)
