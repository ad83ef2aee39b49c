"""Per-query retrieval traces and depth attribution."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class LevelTrace:
    level: int
    budget: int
    per_node_budget: int
    n_candidates: int
    n_scored: int
    n_centroids: int
    node_counts: dict = field(default_factory=dict)  # node id -> hits returned
    missing_nodes: list = field(default_factory=list)
    topped_up: list = field(default_factory=list)  # shards re-queried at the full budget
    seconds: float = 0.0

    @property
    def cost(self):
        return self.n_scored + self.n_centroids


@dataclass
class RetrievalTrace:
    predicted: int
    sigma: float
    final: int
    levels: list = field(default_factory=list)

    @property
    def cost(self):
        """Vectors and centroids scored across all levels."""
        return sum(lv.cost for lv in self.levels)

    @property
    def seconds(self):
        return sum(lv.seconds for lv in self.levels)

    def to_dict(self, timings=True):
        d = asdict(self)
        d["cost"] = self.cost
        for lv in d["levels"]:
            lv["node_counts"] = {str(k): v for k, v in sorted(lv["node_counts"].items())}
            if not timings:
                lv.pop("seconds")
        return d

    def to_json(self, timings=True):
        return json.dumps(self.to_dict(timings), sort_keys=True)


def write_jsonl(traces, path, timings=True):
    with open(path, "w") as fh:
        for t in traces:
            fh.write(t.to_json(timings) + "\n")


def hit_attribution(traces, n_levels=None):
    """Fraction of queries whose final depth equals each level."""
    finals = np.array([t.final for t in traces], dtype=np.int64)
    if finals.size == 0:
        raise ValueError("hit attribution needs at least one trace")
    n_levels = n_levels or int(finals.max())
    counts = np.bincount(finals, minlength=n_levels + 1)[1:n_levels + 1]
    return counts / counts.sum()
