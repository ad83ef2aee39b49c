"""Throughput of a simulated cluster, replayed from recorded per-query work.

Queries are first run for real through an in-process cluster. Each one is
recorded as a sequence of scatter rounds holding, for every shard call, the
work the node did (vectors and centroids scored, ids received and returned)
and the message sizes. A linear :class:`CostModel` turns that work into
service times, and a discrete-event simulation replays it with every node
as an independent server, which a single Python process cannot provide.
Shard calls are routed at replay time among the shard's replicas by the same
min-max EWMA rule the coordinator uses, fed by simulated in-flight counts.

Costing work instead of replaying wall-clock times keeps the result
reproducible; :func:`calibrate` fits the model to measured times.
"""

import heapq
import itertools
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import nnls

from .load import route, update_load
from .protocol import HEADER, MsgType, SearchReply, SearchRequest
from .transport import LatencyModel


@dataclass(frozen=True)
class CallWork:
    shard: int
    dim: int
    n_scored: int
    n_centroids: int
    n_restrict: int
    n_returned: int
    bytes_in: int
    bytes_out: int
    seconds: float = 0.0  # measured node time, used only for calibration


@dataclass
class RoundWork:
    calls: list
    n_merged: int  # hits the coordinator had to merge


@dataclass
class QueryProfile:
    rounds: list = field(default_factory=list)
    coordinator_seconds: float = 0.0  # measured, used only for calibration

    @property
    def n_calls(self):
        return sum(len(r.calls) for r in self.rounds)


@dataclass(frozen=True)
class CostModel:
    """Service time in seconds as a linear function of recorded work.

    Node call: ``call + scan * n_scored * dim + probe * n_centroids * dim
    + per_id * (n_restrict + n_returned)``. Coordinator, per query:
    ``query + per_round * rounds + per_message * calls + per_merged * hits``.
    Defaults average three :func:`calibrate` fits on one desk core over
    clusters of 1 to 16 nodes.
    """
    call: float = 7.6e-5
    scan: float = 1.0e-8
    probe: float = 1.0e-8
    per_id: float = 0.0
    query: float = 0.0
    per_round: float = 1.3e-4
    per_message: float = 4.7e-5
    per_merged: float = 1.3e-7

    def node_seconds(self, c):
        return (self.call + self.scan * c.n_scored * c.dim + self.probe * c.n_centroids * c.dim
                + self.per_id * (c.n_restrict + c.n_returned))

    def round_seconds(self, r):
        return self.per_round + self.per_message * len(r.calls) + self.per_merged * r.n_merged

    def as_dict(self):
        return asdict(self)


class ProfilingSearcher:
    """Searcher proxy that records a :class:`QueryProfile` per query."""

    def __init__(self, coordinator, clock=time.perf_counter):
        self.coordinator = coordinator
        self.clock = clock
        self._profile = None
        self._calls = None
        self._node_time = 0.0
        self._start = 0.0
        coordinator.transport.observer = self._observe

    @property
    def n_partitions(self):
        return self.coordinator.n_partitions

    @property
    def dims(self):
        return self.coordinator.dims

    def _observe(self, node, request, reply, seconds):
        t0 = self.clock()
        if self._calls is not None and request[4] == MsgType.SEARCH:
            req = SearchRequest.decode(request[HEADER.size:])
            n_scored = n_centroids = n_returned = 0
            if reply[4] == MsgType.SEARCH_RESULT:
                rep = SearchReply.decode(reply[HEADER.size:])
                n_scored, n_centroids, n_returned = rep.n_scored, rep.n_centroids, len(rep.ids)
            self._calls.append(CallWork(
                req.shard, len(req.query), int(n_scored), int(n_centroids),
                0 if req.restrict is None else len(req.restrict), n_returned,
                len(request), len(reply), seconds))
        # bookkeeping time is not coordinator work
        self._node_time += seconds + (self.clock() - t0)

    def begin(self):
        self._profile = QueryProfile()
        self._node_time = 0.0
        self._start = self.clock()

    def search_level(self, *args, **kwargs):
        self._calls = []
        got = self.coordinator.search_level(*args, **kwargs)
        calls, self._calls = self._calls, None
        merged = sum(len(p.ids) for p in got.partials)
        self._profile.rounds.append(RoundWork(calls, merged))
        return got

    def end(self):
        prof, self._profile = self._profile, None
        prof.coordinator_seconds = self.clock() - self._start - self._node_time
        return prof


def profile_queries(coordinator, queries, run_query, warmup=5):
    """Record one :class:`QueryProfile` per query.

    ``run_query(searcher, query)`` must issue the query through ``searcher``.
    """
    prof = ProfilingSearcher(coordinator)
    try:
        for q in list(queries[:warmup]):
            prof.begin()
            run_query(prof, q)
            prof.end()
        out = []
        for q in queries:
            prof.begin()
            run_query(prof, q)
            out.append(prof.end())
    finally:
        coordinator.transport.observer = None
    return out


def calibrate(profiles):
    """Fit a :class:`CostModel` to the measured times in ``profiles`` (non-negative least squares)."""
    calls = [c for p in profiles for r in p.rounds for c in r.calls]
    if len(calls) < 4 or len(profiles) < 4:
        raise ValueError("need at least four queries and four node calls to calibrate")
    A = np.array([[1.0, c.n_scored * c.dim, c.n_centroids * c.dim, c.n_restrict + c.n_returned]
                  for c in calls])
    y = np.array([c.seconds for c in calls])
    scale = np.maximum(A.max(axis=0), 1e-12)
    node, _ = nnls(A / scale, y)
    node /= scale
    B = np.array([[1.0, len(p.rounds), p.n_calls, sum(r.n_merged for r in p.rounds)]
                  for p in profiles])
    z = np.array([p.coordinator_seconds for p in profiles])
    scale = np.maximum(B.max(axis=0), 1e-12)
    coord, _ = nnls(B / scale, z)
    coord /= scale
    return CostModel(*(float(v) for v in np.concatenate([node, coord])))


class _Pool:
    """``n`` identical FIFO servers."""

    def __init__(self, sim, n):
        self.sim = sim
        self.free = n
        self.queue = deque()
        self.busy = 0.0

    def request(self, seconds, done):
        if self.free:
            self.free -= 1
            self._start(seconds, done)
        else:
            self.queue.append((seconds, done))

    def _start(self, seconds, done):
        self.busy += seconds
        self.sim.at(self.sim.now + seconds, lambda: self._finish(done))

    def _finish(self, done):
        if self.queue:
            self._start(*self.queue.popleft())
        else:
            self.free += 1
        done()


class _Sim:
    def __init__(self):
        self.now = 0.0
        self._heap = []
        self._seq = itertools.count()

    def at(self, t, fn):
        heapq.heappush(self._heap, (t, next(self._seq), fn))

    def run(self):
        while self._heap:
            self.now, _, fn = heapq.heappop(self._heap)
            fn()


@dataclass
class SimulationReport:
    n_nodes: int
    n_queries: int
    makespan: float
    qps: float
    mean_latency_ms: float
    network_ms: float  # mean network delay on each query's critical path
    coordinator_utilization: float
    node_utilization: np.ndarray

    def as_dict(self):
        return {"n_nodes": self.n_nodes, "n_queries": self.n_queries, "qps": self.qps,
                "mean_latency_ms": self.mean_latency_ms, "network_ms": self.network_ms,
                "coordinator_utilization": self.coordinator_utilization,
                "max_node_utilization": float(self.node_utilization.max())}


def simulate(profiles, hosts, cost=CostModel(), node_workers=1, coordinator_workers=8,
             clients=32, latency=LatencyModel(), alpha=0.9):
    """Replay ``profiles`` on a closed-loop cluster.

    ``hosts[shard]`` lists the nodes holding each shard. ``clients`` queries
    are kept in flight and each finished query is replaced by the next
    profile. Coordinator work queues for one of ``coordinator_workers``
    servers, each shard call for one of ``node_workers`` servers on the node
    the router picks, and every message is delayed by ``latency`` without
    occupying a server.
    """
    if not profiles:
        raise ValueError("nothing to simulate")
    n_nodes = 1 + max(n for hs in hosts for n in hs)
    sim = _Sim()
    coord = _Pool(sim, coordinator_workers)
    nodes = [_Pool(sim, node_workers) for _ in range(n_nodes)]
    loads = dict.fromkeys(range(n_nodes), 0.0)
    in_flight = dict.fromkeys(range(n_nodes), 0)
    pending = deque(profiles)
    latencies, network = [], []

    def track(node, delta):
        in_flight[node] += delta
        loads[node] = update_load(loads[node], in_flight[node], alpha)

    def launch():
        if pending:
            state = {"start": sim.now, "net": 0.0}
            prof = pending.popleft()
            coord.request(cost.query, lambda: run_round(prof.rounds, 0, state))

    def run_round(rounds, i, state):
        if i == len(rounds):
            latencies.append(sim.now - state["start"])
            network.append(state["net"])
            launch()
            return
        rnd = rounds[i]
        coord.request(cost.round_seconds(rnd), lambda: scatter(rounds, i, state))

    def scatter(rounds, i, state):
        calls = rounds[i].calls
        if not calls:
            run_round(rounds, i + 1, state)
            return
        left = [len(calls)]
        state["net"] += max(latency.delay_ms(c.bytes_in) + latency.delay_ms(c.bytes_out)
                            for c in calls)

        def returned(node):
            track(node, -1)
            left[0] -= 1
            if left[0] == 0:
                run_round(rounds, i + 1, state)

        for c in calls:
            node = route(hosts[c.shard], loads)
            track(node, +1)
            back = latency.delay_ms(c.bytes_out) / 1e3

            def serve(node=node, seconds=cost.node_seconds(c), back=back):
                nodes[node].request(seconds, lambda: sim.at(sim.now + back, lambda: returned(node)))
            sim.at(sim.now + latency.delay_ms(c.bytes_in) / 1e3, serve)

    for _ in range(min(clients, len(profiles))):
        launch()
    sim.run()
    span = sim.now
    return SimulationReport(
        n_nodes=n_nodes, n_queries=len(profiles), makespan=span,
        qps=len(profiles) / span if span > 0 else float("inf"),
        mean_latency_ms=float(np.mean(latencies) * 1e3), network_ms=float(np.mean(network)),
        coordinator_utilization=coord.busy / (span * coordinator_workers),
        node_utilization=np.array([p.busy / (span * node_workers) for p in nodes]))
