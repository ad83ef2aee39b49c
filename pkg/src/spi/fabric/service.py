"""On-disk cluster layouts and the client-facing query endpoint."""

import itertools
import json
from pathlib import Path

import numpy as np

from ..controller.depth import DepthController, fixed_plan
from ..exceptions import ProtocolError
from ..retrieval.pipeline import Shard, retrieve
from .coordinator import Coordinator
from .node import NodeRuntime
from .partition import PartitionMap
from .protocol import ErrorCode, ErrorReply, Frame, MsgType, SearchReply, SearchRequest, decode_frame
from .transport import LocalTransport, SocketTransport

LAYOUT_FILE = "layout.json"
PARTITION_FILE = "partition.spp"


def shard_file(shard_id):
    return f"shard_{shard_id:04d}.sps"


def save_layout(directory, pmap, shards):
    """Write the partition map, one file per shard and a small JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / PARTITION_FILE).write_bytes(pmap.to_bytes())
    for shard in shards:
        (directory / shard_file(shard.shard_id)).write_bytes(shard.to_bytes())
    manifest = {"n_nodes": pmap.n_nodes, "replication": pmap.replication,
                "dims": list(shards[0].dims), "n_docs": int(sum(len(s) for s in shards)),
                "shards": [shard_file(s.shard_id) for s in shards]}
    (directory / LAYOUT_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_layout(directory):
    """``(manifest, pmap)`` of a saved layout."""
    directory = Path(directory)
    manifest = json.loads((directory / LAYOUT_FILE).read_text())
    pmap = PartitionMap.from_bytes((directory / PARTITION_FILE).read_bytes())
    return manifest, pmap


def load_node(directory, node_id, **kwargs):
    """Runtime for ``node_id`` holding every shard the layout places on it."""
    _, pmap = load_layout(directory)
    directory = Path(directory)
    shards = {s: Shard.from_bytes((directory / shard_file(s)).read_bytes())
              for s in pmap.shards_on(node_id)}
    return NodeRuntime(node_id, shards, **kwargs)


def local_coordinator(directory, **kwargs):
    """Coordinator over in-process nodes loaded from a layout."""
    manifest, pmap = load_layout(directory)
    nodes = {n: load_node(directory, n, cache_specs=None) for n in range(pmap.n_nodes)}
    return Coordinator(pmap, LocalTransport(nodes), manifest["dims"], **kwargs)


def remote_coordinator(directory, addresses, **kwargs):
    """Coordinator over ``addresses[node] = (host, port)`` served by ``serve-node``."""
    manifest, pmap = load_layout(directory)
    if sorted(addresses) != list(range(pmap.n_nodes)):
        raise ValueError(f"need an address for each of the {pmap.n_nodes} nodes")
    return Coordinator(pmap, SocketTransport(addresses), manifest["dims"], parallel=True, **kwargs)


class QueryFrontend:
    """Answers client SEARCH frames by running a full retrieval.

    The request's ``query`` is a source-space vector and ``k`` the result
    count; ``level`` 0 lets the controller pick the depth, any other value
    forces that depth with the default budgets. The reply's ``n_scored``
    carries the query's total scored-vector count.
    """

    def __init__(self, encoder, searcher, controller=None):
        self.encoder = encoder
        self.searcher = searcher
        self.controller = controller or DepthController(n_levels=encoder.n_levels_)

    def handle(self, frame):
        if isinstance(frame, (bytes, bytearray, memoryview)):
            frame = decode_frame(frame)
        rid = frame.request_id
        try:
            if frame.type != MsgType.SEARCH:
                raise ProtocolError(f"unsupported message type {frame.type}")
            req = SearchRequest.decode(frame.payload)
            plan = fixed_plan(req.level, req.k) if req.level else None
            res = retrieve(req.query, self.encoder, self.controller, self.searcher, req.k, plan)
            reply = SearchReply(res.level, res.ids, res.scores.astype(np.float64), res.trace.cost,
                                sum(lv.n_centroids for lv in res.trace.levels), 0)
            return Frame(MsgType.SEARCH_RESULT, rid, reply.encode())
        except ProtocolError as exc:
            err = ErrorReply(ErrorCode.MALFORMED, str(exc))
        except Exception as exc:  # reported to the client, the server keeps running
            err = ErrorReply(ErrorCode.INTERNAL, f"{type(exc).__name__}: {exc}")
        return Frame(MsgType.ERROR, rid, err.encode())


_client_ids = itertools.count(1)


def query_remote(address, query, k=10, level=0, timeout=10.0):
    """Send one query to a :class:`QueryFrontend` served over TCP."""
    transport = SocketTransport({0: tuple(address)})
    try:
        req = SearchRequest(0, int(level), int(k), np.asarray(query, dtype=np.float64))
        reply = transport.call(0, Frame(MsgType.SEARCH, next(_client_ids), req.encode()), timeout)
    finally:
        transport.close()
    if reply.type == MsgType.ERROR:
        err = ErrorReply.decode(reply.payload)
        raise RuntimeError(f"query failed: {err.message}")
    return SearchReply.decode(reply.payload)
