"""``spi`` command line: data preparation, training, indexing, querying, serving and benchmarks.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

import argparse
import ast
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bench import report
from .bench.corpus import make_corpus, make_queries
from .bench.experiments import (EXPERIMENTS, ConfigError, ExperimentConfig, ExperimentError,
                                run_experiment)
from .bench.ingest import IngestError, ingest, write_vectors
from .bench.oracle import oracle_batch
from .controller.depth import DepthController, fixed_plan, train_controller
from .controller.labeling import label_queries
from .fabric.cluster import build_shards
from .fabric.partition import partition
from .fabric.service import (QueryFrontend, load_node, local_coordinator,
                             query_remote, remote_coordinator, save_layout)
from .fabric.transport import NodeServer
from .index.level_index import BACKENDS, IndexSpec
from .pyramid.encoder import ProgressiveEncoder
from .retrieval.pipeline import retrieve

log = logging.getLogger("spi")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class CliError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# -- helpers -------------------------------------------------------------------

def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise CliError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def int_list(text):
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def out_dir(args):
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_vectors(path):
    return ingest(path).corpus.vectors


def emit(args, rows, name):
    """Write ``rows`` as ``<out>/<name>.<format>`` and return the path."""
    text = report.rows_to_csv(rows) if args.format == "csv" else report.rows_to_json(rows)
    return report.write_text(out_dir(args) / f"{name}.{args.format}", text)


def parse_address(text):
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise CliError(f"bad address {text!r}; expected host:port")
    return (host or "127.0.0.1", int(port))


def index_spec(args):
    return IndexSpec(args.coarse, n_lists=args.n_lists, n_probe=args.n_probe,
                     pq_subspaces=args.pq_subspaces, pq_bits=args.pq_bits)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_corpus(args):
    corpus = make_corpus(n_docs=args.n_docs, dim=args.dim, n_clusters=args.n_clusters,
                         cluster_std=args.cluster_std, seed=args.seed)
    qs = make_queries(corpus, args.n_queries, hard_fraction=args.hard_fraction, seed=args.seed + 1)
    suffix = ".csv" if args.format == "csv" else ".spv"
    out = out_dir(args)
    write_vectors(out / f"corpus{suffix}", corpus.vectors)
    write_vectors(out / f"queries{suffix}", qs.vectors)
    emit(args, [{"query_id": int(i), "kind": str(k)} for i, k in zip(qs.ids, qs.kinds)], "query_kinds")
    print(json.dumps({"n_docs": corpus.n_docs, "dim": corpus.dim, "n_queries": len(qs.ids),
                      "corpus": str(out / f"corpus{suffix}")}))


def cmd_ingest(args):
    try:
        got = ingest(args.file, args.input_format, args.storage, args.dim)
    except IngestError as exc:
        raise CliError(str(exc)) from None
    write_vectors(out_dir(args) / "corpus.spv", got.corpus.vectors)
    print(json.dumps(got.summary()))


def cmd_train_encoder(args):
    X = load_vectors(args.corpus)
    enc = ProgressiveEncoder(level_dims=args.levels, fine_blend=args.fine_blend, epochs=args.epochs,
                             learning_rate=args.learning_rate, batch_size=args.batch_size,
                             random_state=args.seed).fit(X)
    path = out_dir(args) / "encoder.spe"
    enc.save(path)
    (out_dir(args) / "encoder_history.csv").write_text(enc.history_csv())
    print(json.dumps({"encoder": str(path), "dims": list(enc.dims_)}))


def cmd_build_index(args):
    X = load_vectors(args.corpus)
    enc = ProgressiveEncoder.load(args.encoder)
    levels = enc.encode(X)
    ids = np.arange(X.shape[0], dtype=np.int64)
    replication = args.replication or min(2, args.nodes)
    pmap = partition(levels[0], args.nodes, replication, seed=args.seed, ids=ids)
    shards = build_shards(levels, ids, pmap, index_spec(args), IndexSpec("Flat"), args.seed)
    manifest = save_layout(out_dir(args) / "layout", pmap, shards)
    print(json.dumps({"layout": str(out_dir(args) / "layout"), **manifest}))


class _LayoutSystem:
    """Adapter giving :func:`label_queries` its ``retrieve`` / ``encoder_`` / ``n_levels_``."""

    def __init__(self, encoder, searcher):
        self.encoder_ = encoder
        self.searcher = searcher
        self.n_levels_ = encoder.n_levels_

    def retrieve(self, query, k, plan):
        return retrieve(query, self.encoder_, DepthController(self.n_levels_), self.searcher, k, plan)


def _layout_truth(layout, encoder, queries, k):
    """Exact top-``k`` at the finest level over every doc in the layout."""
    coord = local_coordinator(layout)
    ids, vecs = [], []
    for node in coord.transport.nodes.values():
        for s, shard in node.shards.items():
            if coord.pmap.hosts(s)[0] == node.node_id:
                i, v = shard.level_vectors(shard.n_levels)
                ids.append(i)
                vecs.append(v)
    order = np.argsort(np.concatenate(ids))
    fine = encoder.encode(queries)[-1]
    return coord, oracle_batch(np.concatenate(vecs)[order], fine, k, np.concatenate(ids)[order])[0]


def cmd_label_queries(args):
    enc = ProgressiveEncoder.load(args.encoder)
    Q = load_vectors(args.queries)
    coord, truth = _layout_truth(args.layout, enc, Q, args.k)
    lab = label_queries(_LayoutSystem(enc, coord), Q, truth, args.k, args.tau)
    rows = [{"query_id": int(q), "label": int(lb), "entropy": float(h),
             **{f"recall_{i + 1}": float(r) for i, r in enumerate(rec)}}
            for q, lb, h, rec in zip(lab.query_ids, lab.labels, lab.entropy, lab.recalls)]
    path = emit(args, rows, "labels")
    print(json.dumps({"labels": str(path), "histogram": lab.histogram().tolist()}))


def _read_labels(path):
    text = Path(path).read_text()
    if path.endswith(".json"):
        rows = json.loads(text)
    else:
        rows = list(csv.DictReader(text.splitlines()))
    return np.array([int(r["label"]) for r in rows], dtype=np.int64)


def cmd_train_controller(args):
    enc = ProgressiveEncoder.load(args.encoder)
    Q1 = enc.encode(load_vectors(args.queries), max_level=1)[0].astype(np.float64)
    labels = _read_labels(args.labels)
    if labels.shape[0] != Q1.shape[0]:
        raise CliError(f"{labels.shape[0]} labels for {Q1.shape[0]} queries")
    ctrl, rep = train_controller(Q1, labels, n_levels=enc.n_levels_, threshold=args.threshold,
                                 random_state=args.seed, n_prototypes=args.n_prototypes)
    path = out_dir(args) / "controller.spc"
    ctrl.save(path)
    print(json.dumps({"controller": str(path), **rep}))


def _controller(args, enc):
    return DepthController.load(args.controller) if args.controller else DepthController(enc.n_levels_)


def cmd_query(args):
    enc = ProgressiveEncoder.load(args.encoder)
    Q = load_vectors(args.queries)
    rows, seconds = [], []
    if args.coordinator:
        address = parse_address(args.coordinator)
        for qi, q in enumerate(Q):
            t0 = time.perf_counter()
            rep = query_remote(address, q, args.k, args.depth)
            seconds.append(time.perf_counter() - t0)
            rows.extend({"query_id": qi, "rank": r + 1, "doc_id": int(d), "score": float(s),
                         "level": int(rep.level), "scored_vectors": int(rep.n_scored)}
                        for r, (d, s) in enumerate(zip(rep.ids, rep.scores)))
    else:
        if not args.layout:
            raise CliError("query needs --layout or --coordinator")
        coord = local_coordinator(args.layout)
        ctrl = _controller(args, enc)
        plan = fixed_plan(args.depth, args.k) if args.depth else None
        for qi, q in enumerate(Q):
            t0 = time.perf_counter()
            res = retrieve(q, enc, ctrl, coord, args.k, plan)
            seconds.append(time.perf_counter() - t0)
            rows.extend({"query_id": qi, "rank": r + 1, "doc_id": int(d), "score": float(s),
                         "level": res.level, "scored_vectors": res.trace.cost}
                        for r, (d, s) in enumerate(zip(res.ids, res.scores)))
    path = emit(args, rows, "results")
    lat = np.array(seconds) * 1e3
    print(json.dumps({"results": str(path), "n_queries": len(Q),
                      "mean_latency_ms": float(lat.mean()) if lat.size else 0.0}))


def cmd_bench(args, extra):
    params, grid = {}, {}
    for key, value in extra.items():
        if key.startswith("grid."):
            v = literal(value)
            grid[key[5:]] = list(v) if isinstance(v, (list, tuple)) else [v]
        else:
            params[key] = literal(value)
    exp = EXPERIMENTS[args.experiment]
    for key, value in args.param or []:
        params[key] = literal(value)
    full_grid = {**exp.grid, **grid} if grid else None
    config = ExperimentConfig(args.experiment, full_grid, args.repetitions, args.out, args.seed,
                              params, args.format)
    try:
        rep = run_experiment(config)
    except ExperimentError as exc:
        print(f"partial results flushed to {args.out}", file=sys.stderr)
        raise RuntimeError(str(exc)) from None
    for name, ok in rep.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {args.experiment}:{name}")
    print(json.dumps({"files": [str(f) for f in rep.files], "passed": rep.passed}))


def _serve(server, what):
    print(json.dumps({"serving": what, "address": "%s:%d" % server.address}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_serve_node(args):
    runtime = load_node(args.layout, args.node_id)
    _serve(NodeServer(runtime, args.host, args.port), f"node {args.node_id}")


def cmd_serve_coordinator(args):
    enc = ProgressiveEncoder.load(args.encoder)
    if args.nodes:
        addresses = {i: parse_address(a) for i, a in enumerate(args.nodes.split(","))}
        searcher = remote_coordinator(args.layout, addresses, quorum=args.quorum, timeout=args.timeout)
    else:
        searcher = local_coordinator(args.layout, quorum=args.quorum, timeout=args.timeout)
    front = QueryFrontend(enc, searcher, _controller(args, enc))
    _serve(NodeServer(front, args.host, args.port), "coordinator")


# -- parser --------------------------------------------------------------------

GLOBAL_DESTS = ("seed", "config", "out", "format", "verbose")


def _global_flags(parser, defaults=True):
    # subcommands repeat the flags without defaults so a value given before them survives
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--seed", type=int, default=d(0), help="base random seed")
    parser.add_argument("--config", default=d(None), help="file of key=value lines overriding defaults")
    parser.add_argument("--out", default=d("out"), help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default=d("csv"),
                        help="tabular output format")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return parser


def build_parser():
    common = _global_flags(argparse.ArgumentParser(add_help=False), defaults=False)
    p = _global_flags(argparse.ArgumentParser(prog="spi", description=__doc__.splitlines()[0]))
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text, parents=[common])
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-corpus", cmd_gen_corpus, "generate a synthetic corpus and query set")
    sp.add_argument("--n-docs", type=int, default=10000)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--n-clusters", type=int, default=50)
    sp.add_argument("--cluster-std", type=float, default=0.15)
    sp.add_argument("--n-queries", type=int, default=500)
    sp.add_argument("--hard-fraction", type=float, default=0.5)

    sp = add("ingest", cmd_ingest, "validate and normalize an embedding file")
    sp.add_argument("file")
    sp.add_argument("--input-format", choices=("binary", "csv"), default=None)
    sp.add_argument("--storage", choices=("Float32", "Int8Scaled"), default="Float32")
    sp.add_argument("--dim", type=int, default=None, help="expected dimension")

    sp = add("train-encoder", cmd_train_encoder, "train the progressive encoder")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--levels", type=int_list, default=(16, 32, 64), help="level dims, e.g. 16,32,64")
    sp.add_argument("--fine-blend", type=float, default=0.5)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--learning-rate", type=float, default=3e-4)
    sp.add_argument("--batch-size", type=int, default=256)

    sp = add("build-index", cmd_build_index, "encode a corpus and write a partitioned index layout")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--nodes", type=int, default=1)
    sp.add_argument("--replication", type=int, default=None)
    sp.add_argument("--coarse", choices=BACKENDS, default="IVF")
    sp.add_argument("--n-lists", type=int, default=64)
    sp.add_argument("--n-probe", type=int, default=4)
    sp.add_argument("--pq-subspaces", type=int, default=16)
    sp.add_argument("--pq-bits", type=int, default=8)

    sp = add("label-queries", cmd_label_queries, "label queries with their cheapest sufficient depth")
    sp.add_argument("--layout", required=True)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--tau", type=float, default=0.98)

    sp = add("train-controller", cmd_train_controller, "fit the depth controller on labeled queries")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--threshold", type=float, default=0.4)
    sp.add_argument("--n-prototypes", type=int, default=32)

    sp = add("query", cmd_query, "run queries against a layout or a running coordinator")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--layout")
    sp.add_argument("--controller")
    sp.add_argument("--coordinator", help="host:port of serve-coordinator")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--depth", type=int, default=0, help="force this depth (0: controller)")

    sp = add("bench", cmd_bench, "run a named experiment")
    sp.add_argument("experiment", choices=sorted(EXPERIMENTS))
    sp.add_argument("--repetitions", type=int, default=1)
    sp.add_argument("--param", nargs=2, action="append", metavar=("KEY", "VALUE"),
                    help="override one experiment parameter")

    sp = add("serve-node", cmd_serve_node, "serve one node of a layout over TCP")
    sp.add_argument("--layout", required=True)
    sp.add_argument("--node-id", type=int, required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=0)

    sp = add("serve-coordinator", cmd_serve_coordinator, "serve client queries over TCP")
    sp.add_argument("--layout", required=True)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--controller")
    sp.add_argument("--nodes", help="comma-separated host:port per node id; omit to load nodes in-process")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=0)
    sp.add_argument("--quorum", type=int, default=None)
    sp.add_argument("--timeout", type=float, default=2.0)
    return p


def _apply_config(parser, argv):
    """Turn config keys into subcommand defaults; returns keys no option claims."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    config = read_config(known.config)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in sub.choices), None)
    if command is None:
        return {}
    sp = sub.choices[command]
    top = {k: v for k, v in config.items() if k in GLOBAL_DESTS and k != "config"}
    if "verbose" in top:
        top["verbose"] = top["verbose"].lower() in ("1", "true", "yes", "on")
    if "seed" in top:
        top["seed"] = int(top["seed"])
    parser.set_defaults(**top)
    dests = {a.dest for a in sp._actions} - set(GLOBAL_DESTS)
    claimed = {k: v for k, v in config.items() if k in dests and k != "fn"}
    sp.set_defaults(**claimed)
    return {k: v for k, v in config.items() if k not in claimed and k not in top and k != "config"}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        extra = _apply_config(parser, argv)
    except CliError as exc:
        print(f"spi: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "bench":
            args.fn(args, extra)
        else:
            if extra:
                raise CliError(f"unknown config key(s) for {args.command}: {sorted(extra)}")
            args.fn(args)
    except (CliError, ConfigError) as exc:
        print(f"spi: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"spi: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
