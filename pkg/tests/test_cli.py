import socket
import subprocess
import sys

import pytest

from chunkbench.chunkers import STRATEGIES, chunk_corpus
from chunkbench.cli import build_parser, main

TIMING_FILES = {"report_cost.csv", "report_cost.md", "figures/cost.png"}


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def non_timing(files):
    return {k: v for k, v in files.items() if k not in TIMING_FILES and not k.startswith("costs/")}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out-dir", str(out), "--quiet"]) == 0
    return out


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exit_:
        main(["all", "--help"])
    assert exit_.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    for flag, default in [("--fixed-size", "512"), ("--fixed-overlap", "128"), ("--recursive-size", "1024"),
                          ("--recursive-overlap", "100"), ("--percentile", "0.8"), ("--max-header-level", "3"),
                          ("--depth", "10"), ("--k", "10"), ("--cutoffs", "3 5"), ("--alpha", "0.05"),
                          ("--seed", "1"), ("--dim", "256"), ("--embedder", "local")]:
        assert flag in text
        assert f"default: {default})" in text, flag


def test_every_option_documents_its_default():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        for action in p._actions:
            if action.option_strings and action.dest != "help" and action.nargs != 0 and not action.required:
                assert "default" in (action.help or ""), f"{name} {action.option_strings}"


def test_parsed_defaults_match_library():
    args = build_parser().parse_args(["all"])
    assert (args.fixed_size, args.fixed_overlap) == (512, 128)
    assert (args.recursive_size, args.recursive_overlap) == (1024, 100)
    assert args.percentile == 0.8 and args.max_header_level == 3
    assert args.depth == 10 and args.k == 10 and args.cutoffs == [3, 5] and args.alpha == 0.05


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exit_:
        main(["eval", "--bogus"])
    assert exit_.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_qrels_is_usage_error(tmp_path, capsys):
    run = tmp_path / "r.trec"
    run.write_text("q1 Q0 c1 1 0.5 t\n")
    assert main(["eval", "--run", str(run), "--qrels", str(tmp_path / "nope.txt"), "--quiet"]) == 1
    err = capsys.readouterr().err
    assert "usage: chunkbench eval" in err and "nope.txt" in err


def test_malformed_qrels_is_data_error(tmp_path, capsys):
    run = tmp_path / "r.trec"
    run.write_text("q1 Q0 c1 1 0.5 t\n")
    qrels = tmp_path / "q.txt"
    qrels.write_text("q1 0 c1 1\nq1 0 c2 7\n")
    assert main(["eval", "--run", str(run), "--qrels", str(qrels), "--quiet"]) == 2
    assert "line 2" in capsys.readouterr().err


def test_remote_failure_exit_code(synth_dir, tmp_path, monkeypatch):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    monkeypatch.delenv("CHUNKBENCH_EMBED_KEY", raising=False)
    monkeypatch.setattr("time.sleep", lambda _: None)
    code = main(["index", "--chunks", str(tmp_path / "c.jsonl"), "--quiet"])
    assert code == 1
    (tmp_path / "c.jsonl").write_text(
        '{"chunk_id": "d:fixed:00000", "doc_id": "d", "strategy": "fixed", "ordinal": 0, '
        '"text": "pump", "char_span": [0, 4], "header_path": []}\n')
    code = main(["index", "--chunks", str(tmp_path / "c.jsonl"), "--embedder", "remote",
                 "--embed-url", f"http://127.0.0.1:{port}", "--out-dir", str(tmp_path), "--quiet"])
    assert code == 3


def test_chunk_count_matches_library(synth_dir, docs, capsys):
    assert main(["chunk", "--strategy", "fixed", "--out-dir", str(synth_dir), "--quiet"]) == 0
    assert capsys.readouterr().out.strip() == f"fixed: {len(chunk_corpus(docs, 'fixed'))} chunks"


def test_stepwise_cli_equals_library_experiment(synth_dir, experiment):
    out = str(synth_dir)
    g = ["--out-dir", out, "--quiet"]
    for s in STRATEGIES:
        assert main(["chunk", "--strategy", s, *g]) == 0
        assert main(["index", "--chunks", f"{out}/chunks/{s}.jsonl", *g]) == 0
        assert main(["retrieve", "--index", f"{out}/indices/{s}.cbix", *g]) == 0
    assert main(["pool", "--runs", *[f"{out}/runs/{s}.trec" for s in STRATEGIES], *g]) == 0
    assert main(["autoqrels", "--chunks", *[f"{out}/chunks/{s}.jsonl" for s in STRATEGIES], *g]) == 0
    for s in STRATEGIES:
        assert main(["eval", "--run", f"{out}/runs/{s}.trec", "--qrels", f"{out}/qrels.txt", *g]) == 0
    assert main(["sigtest", "--metrics", *[f"{out}/metrics/{s}.csv" for s in STRATEGIES], *g]) == 0
    assert main(["report", *g]) == 0
    cli_files = non_timing(tree(synth_dir))
    lib_files = non_timing(tree(experiment["out"]))
    assert cli_files.keys() == lib_files.keys()
    differing = [k for k in cli_files if cli_files[k] != lib_files[k]]
    assert differing == []


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "chunkbench", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "autoqrels" in proc.stdout
