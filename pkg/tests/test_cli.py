import csv
import json

import pytest

from spi.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_full_workflow(workspace, capsys):
    w = workspace
    code, out, _ = run(capsys, "gen-corpus", "--n-docs", 800, "--dim", 32, "--n-clusters", 8,
                       "--n-queries", 40, "--format", "json", "--out", w)
    assert code == 0 and json.loads(out)["n_docs"] == 800
    assert (w / "corpus.spv").exists() and (w / "query_kinds.json").exists()

    code, out, _ = run(capsys, "train-encoder", "--corpus", w / "corpus.spv", "--levels", "8,16,32",
                       "--epochs", 2, "--out", w)
    assert code == 0 and json.loads(out)["dims"] == [8, 16, 32]

    code, out, _ = run(capsys, "build-index", "--corpus", w / "corpus.spv", "--encoder",
                       w / "encoder.spe", "--nodes", 2, "--n-lists", 8, "--out", w)
    assert code == 0 and json.loads(out)["n_docs"] == 800

    code, out, _ = run(capsys, "label-queries", "--layout", w / "layout", "--encoder", w / "encoder.spe",
                       "--queries", w / "queries.spv", "--out", w)
    assert code == 0
    header = (w / "labels.csv").read_text().splitlines()[0]
    assert header == "query_id,label,entropy,recall_1,recall_2,recall_3"

    code, out, _ = run(capsys, "train-controller", "--encoder", w / "encoder.spe", "--queries",
                       w / "queries.spv", "--labels", w / "labels.csv", "--out", w)
    assert code == 0 and (w / "controller.spc").exists()

    code, out, _ = run(capsys, "query", "--layout", w / "layout", "--encoder", w / "encoder.spe",
                       "--controller", w / "controller.spc", "--queries", w / "queries.spv",
                       "--k", 5, "--out", w)
    assert code == 0 and json.loads(out)["n_queries"] == 40
    rows = list(csv.DictReader((w / "results.csv").read_text().splitlines()))
    assert len(rows) == 200 and rows[0]["rank"] == "1"

    code, _, _ = run(capsys, "query", "--layout", w / "layout", "--encoder", w / "encoder.spe",
                     "--queries", w / "queries.spv", "--depth", 3, "--out", w / "forced")
    assert code == 0
    levels = {r["level"] for r in csv.DictReader((w / "forced" / "results.csv").read_text().splitlines())}
    assert levels == {"3"}


def test_ingest_command(workspace, capsys, tmp_path):
    (tmp_path / "v.csv").write_text("3,4\n1,0\n")
    code, out, _ = run(capsys, "ingest", tmp_path / "v.csv", "--out", tmp_path)
    assert code == 0 and json.loads(out)["n_docs"] == 2
    (tmp_path / "bad.csv").write_text("1,0\n1,oops\n")
    code, _, err = run(capsys, "ingest", tmp_path / "bad.csv", "--out", tmp_path)
    assert code == 2 and "row 1" in err


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "--help")[0] == 0
    assert run(capsys, "no-such-command")[0] == 2
    assert run(capsys, "gen-corpus", "--n-docs", "many")[0] == 2
    # a missing input is a runtime failure, not a configuration error
    code, _, err = run(capsys, "train-encoder", "--corpus", tmp_path / "missing.spv", "--out", tmp_path)
    assert code == 3 and "error" in err
    code, _, err = run(capsys, "query", "--encoder", tmp_path / "x.spe", "--queries", tmp_path / "q.spv")
    assert code == 3


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# small corpus\nn_docs = 120\ndim = 8\nn_clusters = 3\nn_queries = 6\nout = {tmp_path}\n")
    code, out, _ = run(capsys, "gen-corpus", "--config", cfg)
    assert code == 0 and json.loads(out)["n_docs"] == 120
    # command-line flags win over the file
    code, out, _ = run(capsys, "gen-corpus", "--config", cfg, "--n-docs", 50)
    assert code == 0 and json.loads(out)["n_docs"] == 50
    cfg.write_text("bogus_key = 1\n")
    assert run(capsys, "gen-corpus", "--config", cfg)[0] == 2
    cfg.write_text("no equals sign\n")
    assert run(capsys, "gen-corpus", "--config", cfg)[0] == 2


def test_bench_command(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "exactness", "--param", "n_docs", 300, "--param", "n_queries", 5,
                       "--out", tmp_path)
    assert code == 0
    assert "PASS exactness:exact_match" in out
    assert (tmp_path / "exactness.csv").exists() and (tmp_path / "exactness_summary.json").exists()
    code, _, err = run(capsys, "bench", "exactness", "--param", "not_a_param", 1, "--out", tmp_path)
    assert code == 2 and "unknown parameter" in err
