# tests/test_cli.py

import json
import re

import pytest
import yaml

from arag import cli
from arag.cli import EXIT_BACKEND, EXIT_DATA, EXIT_FAILURES, EXIT_OK, EXIT_USAGE, main
from arag.errors import EmbeddingError


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write_config(workdir, synthetic_files, **extra):
    config = {
        "dataset_name": "synthetic",
        "catalog_path": str(synthetic_files["catalog"]),
        "interactions_path": str(synthetic_files["interactions"]),
        "output_dir": str(workdir / "runs"),
        "pipeline": {"candidate_pool_size": 10, "k": 20},
        "backend": {"kind": "mock"},
    }
    config.update(extra)
    path = workdir / "experiment.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


def ranking_lines(output):
    return [line.split()[1] for line in output.splitlines() if re.match(r"^\s*\d+\. ", line)]


# --- ingest ---

def test_ingest_counts_contexts_and_digests_the_store(workdir, synthetic_files, capsys):
    digests = []
    for out_dir in ("store1", "store2"):
        code = main([
            "ingest", "--catalog", str(synthetic_files["catalog"]),
            "--interactions", str(synthetic_files["interactions"]), "--out-dir", out_dir,
        ])
        assert code == EXIT_OK
        output = capsys.readouterr().out
        assert "12 contexts" in output
        digests.append(re.search(r"sha256=([0-9a-f]{64})", output).group(1))
    assert digests[0] == digests[1]
    assert (workdir / "store1" / "contexts.jsonl").exists()


def test_ingest_missing_file_is_a_data_error(workdir, synthetic_files):
    code = main(["ingest", "--catalog", str(workdir / "nope.jsonl"), "--interactions", str(synthetic_files["interactions"])])
    assert code == EXIT_DATA


# --- run and replay ---

def test_run_unknown_user(workdir, synthetic_files):
    config = write_config(workdir, synthetic_files)
    assert main(["run", "nobody", "--config", str(config)]) == EXIT_DATA


def test_run_without_nli_posts_no_nli_messages(workdir, synthetic_files, capsys):
    config = write_config(workdir, synthetic_files)
    assert main(["run", "u00000", "--config", str(config), "--variant", "arag_no_nli"]) == EXIT_OK
    output = capsys.readouterr().out
    assert len(ranking_lines(output)) == 10

    trace = workdir / "runs" / "traces" / "arag_no_nli" / "u00000.jsonl"
    roles = [json.loads(line)["role"] for line in trace.read_text(encoding="utf-8").splitlines()]
    assert roles == ["user_understanding", "context_summary", "item_ranker"]
    assert (workdir / "runs" / "manifest.json").exists()


def test_replay_prints_the_recorded_ranking(workdir, synthetic_files, capsys):
    config = write_config(workdir, synthetic_files)
    assert main(["run", "u00003", "--config", str(config)]) == EXIT_OK
    ranked = ranking_lines(capsys.readouterr().out)

    trace = workdir / "runs" / "traces" / "arag" / "u00003.jsonl"
    assert main(["replay", str(trace)]) == EXIT_OK
    assert ranking_lines(capsys.readouterr().out) == ranked


def test_replay_rejects_empty_and_tampered_traces(workdir, synthetic_files):
    empty = workdir / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    assert main(["replay", str(empty)]) == EXIT_DATA

    config = write_config(workdir, synthetic_files)
    assert main(["run", "u00001", "--config", str(config)]) == EXIT_OK
    trace = workdir / "runs" / "traces" / "arag" / "u00001.jsonl"
    rows = [json.loads(line) for line in trace.read_text(encoding="utf-8").splitlines()]
    rows[-1]["stage"] = 2
    tampered = workdir / "tampered.jsonl"
    tampered.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    assert main(["replay", str(tampered)]) == EXIT_DATA


# --- eval ---

def test_eval_prints_every_variant_row(workdir, synthetic_files, capsys):
    config = write_config(workdir, synthetic_files)
    assert main(["eval", "--config", str(config)]) == EXIT_OK
    output = capsys.readouterr().out
    for label in ("Recency-based", "Vanilla RAG", "ARAG w/o NLI & CSA", "ARAG w/o NLI", "ARAG"):
        assert f"| {label} |" in output
    assert (workdir / "runs" / "summary.json").exists()
    manifest = json.loads((workdir / "runs" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["backend_kind"] == "mock"
    assert set(manifest["dataset_digests"]) == {"catalog.jsonl", "interactions.jsonl"}


def test_eval_with_an_empty_cassette_exceeds_the_failure_limit(workdir, synthetic_files):
    cassette = workdir / "empty_cassette.jsonl"
    cassette.write_text("", encoding="utf-8")
    config = write_config(workdir, synthetic_files, variants=["recency"])
    code = main(["eval", "--config", str(config), "--backend", "replay", "--cassette", str(cassette)])
    assert code == EXIT_FAILURES
    assert (workdir / "runs" / "summary.json").exists()


def test_replay_backend_without_cassette_is_a_usage_error(workdir, synthetic_files):
    config = write_config(workdir, synthetic_files)
    assert main(["eval", "--config", str(config), "--backend", "replay"]) == EXIT_USAGE


def test_remote_embedding_failure_is_a_backend_error(workdir, synthetic_files, monkeypatch):
    def failing(dim):
        raise EmbeddingError("embedding service unreachable")

    monkeypatch.setattr(cli, "make_embedder", failing)
    config = write_config(workdir, synthetic_files)
    assert main(["eval", "--config", str(config)]) == EXIT_BACKEND


# --- usage and configuration errors ---

def test_usage_errors_exit_with_status_one(workdir):
    with pytest.raises(SystemExit) as excinfo:
        main(["frobnicate"])
    assert excinfo.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as excinfo:
        main(["run"])
    assert excinfo.value.code == EXIT_USAGE


def test_missing_config_file(workdir):
    assert main(["eval", "--config", str(workdir / "missing.yaml")]) == EXIT_USAGE


def test_bad_override_is_a_config_error(workdir, synthetic_files):
    config = write_config(workdir, synthetic_files)
    assert main(["eval", "--config", str(config), "--theta", "1.5"]) == EXIT_USAGE


# --- report ---

def test_report_merges_summaries_and_reconciles(workdir, capsys):
    clothing = {"arag": {"ndcg": 0.43937, "hit": 0.5347}, "recency": {"ndcg": 0.30915, "hit": 0.3945},
                "vanilla_rag": {"ndcg": 0.29884, "hit": 0.3792}}
    home = {"arag": {"ndcg": 0.28863, "hit": 0.3834}, "recency": {"ndcg": 0.22443, "hit": 0.2988},
            "vanilla_rag": {"ndcg": 0.22901, "hit": 0.3117}}
    paths = []
    for name, variants in (("Clothing", clothing), ("Home", home)):
        path = workdir / name / "summary.json"
        path.parent.mkdir()
        path.write_text(json.dumps({"dataset": name, "variants": variants}), encoding="utf-8")
        paths.append(str(path))
    published = workdir / "published.yaml"
    published.write_text(yaml.safe_dump({"Clothing": {"ndcg": 42.12, "hit": 35.54}, "Home": {"ndcg": 25.60, "hit": 22.68}}), encoding="utf-8")

    out = workdir / "report.md"
    assert main(["report", *paths, "--out", str(out), "--published", str(published)]) == EXIT_OK
    report = out.read_text(encoding="utf-8")
    assert "| Model | Clothing NDCG@5 | Clothing Hit@5 | Home NDCG@5 | Home Hit@5 |" in report
    assert "| % Improvement | 42.12% | 35.54% | 26.03% | 23.00% |" in report
    assert "- Home ndcg: computed 26.03% but published 25.60%" in report
    assert "Clothing ndcg" not in report
    assert capsys.readouterr().out == report


def test_report_on_a_missing_summary(workdir):
    assert main(["report", str(workdir / "none" / "summary.json")]) == EXIT_DATA
