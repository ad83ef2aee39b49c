"""EWMA load estimates and min-max replica routing."""

import threading

import numpy as np


def update_load(previous, queue_length, alpha=0.9):
    """``alpha * previous + (1 - alpha) * queue_length``."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    return alpha * previous + (1.0 - alpha) * queue_length


def route(eligible, loads, increment=1.0):
    """Pick the eligible node whose selection minimizes the resulting maximum load.

    ``loads`` maps node id to its current estimate. When several choices give
    the same maximum, the one whose own load ends up smaller wins, then the
    lowest id.
    """
    eligible = sorted(int(n) for n in eligible)
    if not eligible:
        raise LookupError("no eligible node to route to")
    others_max = {}
    for node in eligible:
        rest = [v for k, v in loads.items() if k != node]
        others_max[node] = max(rest) if rest else 0.0
    def key(node):
        own = loads.get(node, 0.0) + increment
        return (max(others_max[node], own), own, node)
    return min(eligible, key=key)


class LoadTracker:
    """Per-node in-flight counts feeding EWMA estimates."""

    def __init__(self, n_nodes, alpha=0.9):
        self.alpha = alpha
        self.loads = {i: 0.0 for i in range(n_nodes)}
        self.in_flight = {i: 0 for i in range(n_nodes)}
        self._lock = threading.Lock()

    def snapshot(self):
        return dict(self.loads)

    def begin(self, node):
        with self._lock:
            self.in_flight[node] += 1
            self.loads[node] = update_load(self.loads[node], self.in_flight[node], self.alpha)

    def end(self, node):
        with self._lock:
            self.in_flight[node] = max(0, self.in_flight[node] - 1)
            self.loads[node] = update_load(self.loads[node], self.in_flight[node], self.alpha)

    def choose(self, eligible):
        return route(eligible, self.snapshot())

    def as_array(self):
        return np.array([self.loads[i] for i in sorted(self.loads)])
