"""Transports carrying encoded frames to nodes: in-process and TCP."""

import socket
import socketserver
import threading
import time
from dataclasses import dataclass

from ..exceptions import NodeUnavailableError, ProtocolError
from .protocol import Frame, MsgType, decode_frame, empty_payload, read_frame


@dataclass(frozen=True)
class LatencyModel:
    base_ms: float = 0.2
    per_kb_ms: float = 0.01

    def delay_ms(self, nbytes):
        return self.base_ms + self.per_kb_ms * nbytes / 1024.0


class LocalTransport:
    """Delivers frames to in-process nodes through the full encode/decode path.

    Network delay is accounted per message from the latency model; with
    ``realtime=True`` it is also slept. ``kill`` makes a node refuse
    connections; ``stall`` makes it time out.
    """

    def __init__(self, nodes, latency=LatencyModel(), realtime=False):
        self.nodes = dict(nodes)
        self.latency = latency
        self.realtime = realtime
        self.killed = set()
        self.stalled = set()
        self.network_ms = 0.0
        self.messages = 0
        self.bytes_sent = 0
        self.observer = None  # observer(node_id, request_bytes, reply_bytes, seconds)
        self._lock = threading.Lock()

    def kill(self, node_id):
        self.killed.add(node_id)

    def stall(self, node_id):
        self.stalled.add(node_id)

    def revive(self, node_id, runtime=None):
        self.killed.discard(node_id)
        self.stalled.discard(node_id)
        if runtime is not None:
            self.nodes[node_id] = runtime

    def _account(self, nbytes):
        delay = self.latency.delay_ms(nbytes)
        with self._lock:
            self.network_ms += delay
            self.messages += 1
            self.bytes_sent += nbytes
        if self.realtime:
            time.sleep(delay / 1e3)

    def call(self, node_id, frame, timeout=None):
        if node_id in self.killed or node_id not in self.nodes:
            raise NodeUnavailableError(f"node {node_id} is down")
        if node_id in self.stalled:
            if self.realtime and timeout:
                time.sleep(timeout)
            raise TimeoutError(f"node {node_id} did not answer in time")
        data = frame.encode()
        self._account(len(data))
        t0 = time.perf_counter()
        reply = self.nodes[node_id].handle(data).encode()
        if self.observer is not None:
            self.observer(node_id, data, reply, time.perf_counter() - t0)
        self._account(len(reply))
        return decode_frame(reply)


# -- sockets -----------------------------------------------------------------
def _recv_exact(sock):
    def read(n):
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                if not buf:
                    return b""
                raise ProtocolError("connection closed mid-frame")
            buf.extend(chunk)
        return bytes(buf)
    return read


class _FrameHandler(socketserver.BaseRequestHandler):
    def setup(self):
        with self.server.conn_lock:
            self.server.connections.add(self.request)

    def finish(self):
        with self.server.conn_lock:
            self.server.connections.discard(self.request)

    def handle(self):
        read = _recv_exact(self.request)
        runtime = self.server.runtime
        while True:
            try:
                frame = read_frame(read)
            except (ProtocolError, OSError):
                return
            if frame is None:
                return
            try:
                self.request.sendall(runtime.handle(frame).encode())
            except OSError:
                return


class NodeServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    """TCP front end for a :class:`NodeRuntime`; one thread per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, runtime, host="127.0.0.1", port=0):
        super().__init__((host, port), _FrameHandler)
        self.runtime = runtime
        self.connections = set()
        self.conn_lock = threading.Lock()
        self._thread = None

    @property
    def address(self):
        return self.server_address[:2]

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        """Stop accepting and drop every open connection."""
        self.shutdown()
        self.server_close()
        with self.conn_lock:
            for conn in list(self.connections):
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                conn.close()
            self.connections.clear()


class SocketTransport:
    """Frames over TCP to ``addresses[node_id] = (host, port)``."""

    def __init__(self, addresses, connect_timeout=1.0):
        self.addresses = dict(addresses)
        self.connect_timeout = connect_timeout
        self._pools = {n: [] for n in self.addresses}
        self._lock = threading.Lock()

    def _checkout(self, node_id):
        with self._lock:
            pool = self._pools.setdefault(node_id, [])
            if pool:
                return pool.pop()
        try:
            return socket.create_connection(self.addresses[node_id], timeout=self.connect_timeout)
        except OSError as exc:
            raise NodeUnavailableError(f"node {node_id} unreachable: {exc}") from exc

    def _checkin(self, node_id, sock):
        with self._lock:
            self._pools[node_id].append(sock)

    def call(self, node_id, frame, timeout=None):
        if node_id not in self.addresses:
            raise NodeUnavailableError(f"unknown node {node_id}")
        sock = self._checkout(node_id)
        try:
            sock.settimeout(timeout)
            sock.sendall(frame.encode())
            reply = read_frame(_recv_exact(sock))
            if reply is None:
                raise NodeUnavailableError(f"node {node_id} closed the connection")
        except socket.timeout as exc:
            sock.close()
            raise TimeoutError(f"node {node_id} did not answer in time") from exc
        except OSError as exc:
            sock.close()
            raise NodeUnavailableError(f"node {node_id} connection failed: {exc}") from exc
        except ProtocolError:
            sock.close()
            raise
        self._checkin(node_id, sock)
        return reply

    def close(self):
        with self._lock:
            for pool in self._pools.values():
                for s in pool:
                    s.close()
                pool.clear()


class HeartbeatMonitor:
    """Pings nodes every ``interval`` seconds; ``misses`` consecutive failures mark a node down.

    ``on_change(node_id, state)`` receives ``"up"``, ``"suspect"`` or ``"down"``.
    """

    def __init__(self, transport, node_ids, on_change, interval=0.5, misses=3):
        self.transport = transport
        self.node_ids = list(node_ids)
        self.on_change = on_change
        self.interval = interval
        self.misses = misses
        self.missed = {n: 0 for n in self.node_ids}
        self._stop = threading.Event()
        self._thread = None
        self._rid = 0

    def beat(self):
        """One round of health checks."""
        for n in self.node_ids:
            self._rid += 1
            try:
                reply = self.transport.call(n, Frame(MsgType.HEALTH, self._rid, empty_payload()),
                                            timeout=self.interval)
                ok = reply.type == MsgType.HEALTH
            except (NodeUnavailableError, TimeoutError, ProtocolError):
                ok = False
            if ok:
                if self.missed[n]:
                    self.on_change(n, "up")
                self.missed[n] = 0
                continue
            self.missed[n] += 1
            if self.missed[n] == self.misses:
                self.on_change(n, "down")
            elif self.missed[n] < self.misses:
                self.on_change(n, "suspect")

    def _run(self):
        while not self._stop.wait(self.interval):
            self.beat()

    def start(self):
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
