import json
import os

import pandas as pd
import pytest
import yaml

from src.recommender.cli import dispatch

SMALL_CONFIG = {
    "settings": {"output_dir": "runs"},
    "hyperparams": {
        "dim": 8,
        "max_len": 5,
        "n_neg": 4,
        "n_neg_stage2": 2,
        "batch_size": 16,
        "t1": 1,
        "t2": 1,
        "k": 4,
        "lr": 0.01,
        "stability_users": 10,
        "eval_negatives": 10,
        "max_examples_per_epoch": 32,
        "max_eval_cases": 4,
    },
    "synth": {
        "num_users": 30,
        "num_items": 40,
        "num_envs": 3,
        "num_train_envs": 2,
        "interactions_per_user": 12,
        "stable_dim": 3,
        "spurious_dim": 2,
        "spurious_strength": [0.9, 0.6, 0.9],
        "env_shares": [0.4, 0.4, 0.2],
        "n_attributes": 2,
        "attr_levels": 2,
        "kg_links_per_item": 1,
        "history_evidence_per_user": 5,
    },
    "split": {"train_envs": [0, 1]},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("CIRR_LOG_LEVEL", raising=False)
    with open("config.yaml", "w") as f:
        yaml.safe_dump(SMALL_CONFIG, f)
    monkeypatch.setenv("CIRR_CONFIG", "config.yaml")
    return tmp_path


def _read(path):
    with open(path, "rb") as f:
        return f.read()


@pytest.fixture
def data_dir(workdir):
    assert dispatch(["datagen", "--seed", "3", "--out", "data"]) == 0
    return "data"


def test_datagen_is_deterministic(workdir):
    assert dispatch(["datagen", "--seed", "7", "--out", "a"]) == 0
    assert dispatch(["datagen", "--seed", "7", "--out", "b"]) == 0
    for name in ("interactions.tsv", "evidence.jsonl", "meta.json", "run-manifest"):
        assert _read(os.path.join("a", name)) == _read(os.path.join("b", name))
    manifest = yaml.safe_load(_read(os.path.join("a", "run-manifest")))
    assert manifest["config"]["synth"]["seed"] == 7


def test_usage_errors_exit_with_two(workdir, capsys):
    assert dispatch(["train"]) == 2
    assert dispatch(["no-such-command"]) == 2
    assert dispatch(["datagen", "--set", "hyperparams.k"]) == 2
    assert "error: usage:" in capsys.readouterr().err


def test_help_exits_cleanly(workdir):
    assert dispatch(["--help"]) == 0
    assert dispatch(["train", "--help"]) == 0


def test_runtime_errors_exit_with_one(workdir, capsys):
    assert dispatch(["datagen", "--set", "synth.no_such_key=1"]) == 1
    assert "error: unknown-config-key:" in capsys.readouterr().err
    assert dispatch(["evaluate", "--data", "missing"]) == 1
    assert "error: missing-path:" in capsys.readouterr().err


def test_gradcheck_passes_over_a_hundred_instances(workdir, capsys):
    assert dispatch(["gradcheck", "--instances", "100", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "rank_score." in out
    assert "all " in out


def test_train_evaluate_explain_pipeline(data_dir, capsys):
    assert dispatch(["train", "--data", data_dir, "--out", "run"]) == 0
    for name in ("checkpoint.json", "pool_stats.jsonl", "train_log.csv", "run-manifest"):
        assert os.path.exists(os.path.join("run", name))
    log = pd.read_csv(os.path.join("run", "train_log.csv"))
    assert list(log["stage"]) == [1, 2]

    assert dispatch(["evaluate", "--data", data_dir, "--out", "run"]) == 0
    first = _read(os.path.join("run", "report.csv"))
    assert dispatch(["evaluate", "--data", data_dir, "--out", "run"]) == 0
    assert _read(os.path.join("run", "report.csv")) == first
    report = pd.read_csv(os.path.join("run", "report.csv"))
    assert "ood_delta" in set(report["metric"])
    assert "ndcg@10_env2" in set(report["metric"])

    capsys.readouterr()
    assert dispatch(["explain", "--data", data_dir, "--out", "run", "--user", "0", "--top", "3"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("Top 3 items for user 0:")
    assert "[E" in out
    assert "Citations:" in out


def test_evaluate_over_several_seeds_writes_a_summary(data_dir):
    assert dispatch(["train", "--data", data_dir, "--out", "run"]) == 0
    assert dispatch(["evaluate", "--data", data_dir, "--out", "run", "--seeds", "2"]) == 0
    summary = pd.read_csv(os.path.join("run", "report_summary.csv"))
    assert list(summary.columns) == ["metric", "mean", "stdev"]
    report = pd.read_csv(os.path.join("run", "report.csv"))
    assert sorted(set(report["seed"])) == [0, 1]


def test_resumed_training_matches_an_uninterrupted_run(data_dir):
    assert dispatch(["train", "--data", data_dir, "--out", "full"]) == 0
    assert dispatch(["train", "--data", data_dir, "--out", "part", "--stage", "1"]) == 0
    checkpoint = os.path.join("part", "checkpoint.json")
    assert dispatch(["train", "--data", data_dir, "--out", "part", "--resume", checkpoint]) == 0
    assert _read(os.path.join("part", "checkpoint.json")) == _read(os.path.join("full", "checkpoint.json"))
    assert _read(os.path.join("part", "pool_stats.jsonl")) == _read(os.path.join("full", "pool_stats.jsonl"))


def test_sweep_k_writes_one_row_per_k(data_dir):
    assert dispatch(["train", "--data", data_dir, "--out", "run"]) == 0
    assert dispatch(["sweep-k", "--data", data_dir, "--out", "run", "--k-values", "0,2,4"]) == 0
    table = pd.read_csv(os.path.join("run", "sweep_k.csv"))
    assert list(table["k"]) == [0, 2, 4]
    assert table.loc[0, "evidence_coverage"] == 0.0
    assert dispatch(["sweep-k", "--data", data_dir, "--out", "run", "--k-values", "a,b"]) == 2


def test_ablate_runs_the_requested_variants(data_dir):
    assert dispatch(["ablate", "--data", data_dir, "--out", "abl", "--no-rag"]) == 0
    table = pd.read_csv(os.path.join("abl", "ablation.csv"))
    assert list(dict.fromkeys(table["variant"])) == ["full", "no_rag"]
    no_rag = table[(table["variant"] == "no_rag") & (table["metric"] == "evidence_coverage")]
    assert float(no_rag["mean"].iloc[0]) == 0.0
    assert os.path.exists(os.path.join("abl", "full", "report.txt"))


def test_pipeline_twice_gives_identical_bytes(workdir):
    for run in ("a", "b"):
        assert dispatch(["datagen", "--seed", "3", "--out", f"data_{run}"]) == 0
        assert dispatch(["train", "--data", f"data_{run}", "--out", f"run_{run}"]) == 0
        assert dispatch(["evaluate", "--data", f"data_{run}", "--out", f"run_{run}"]) == 0
    for name in ("checkpoint.json", "pool_stats.jsonl", "report.csv", "report.txt"):
        assert _read(os.path.join("run_a", name)) == _read(os.path.join("run_b", name))


def test_explain_without_retrieval_still_ranks(data_dir, capsys):
    assert dispatch(["train", "--data", data_dir, "--out", "norag", "--k", "0"]) == 0
    capsys.readouterr()
    assert dispatch(["explain", "--data", data_dir, "--out", "norag", "--user", "0", "--top", "3"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("Top 3 items for user 0:")
    assert "No evidence retrieved for item" in out
    assert "[E" not in out


def test_retrieval_on_a_checkpoint_without_stability_is_flagged(data_dir):
    assert dispatch(["train", "--data", data_dir, "--out", "norag", "--k", "0"]) == 0
    assert dispatch(["explain", "--data", data_dir, "--out", "norag", "--user", "0", "--k", "2"]) == 0
    with open(os.path.join("logs", "recommender.log")) as f:
        records = [json.loads(line) for line in f if line.strip()]
    warnings = [r["message"] for r in records if r["levelname"] == "WARNING"]
    assert any("every stability value" in m for m in warnings)


def _scatter_ids(data_dir, out_dir):
    """Copy a generated dataset with users and items moved to sparse raw ids."""
    os.makedirs(out_dir)
    item = lambda i: i * 100000 + 7
    with open(os.path.join(data_dir, "interactions.tsv")) as f:
        lines = f.read().splitlines()
    rows = [lines[0]]
    for line in lines[1:]:
        user, it, rest = line.split("\t", 2)
        rows.append(f"{int(user) * 100000}\t{item(int(it))}\t{rest}")
    with open(os.path.join(out_dir, "interactions.tsv"), "w") as f:
        f.write("\n".join(rows) + "\n")
    with open(os.path.join(data_dir, "evidence.jsonl")) as f:
        records = [json.loads(line) for line in f if line.strip()]
    for r in records:
        for key in ("item_id", "head", "tail"):
            if key in r and r[key] >= 0:
                r[key] = item(r[key])
        if r.get("user_id") is not None:
            r["user_id"] *= 100000
    with open(os.path.join(out_dir, "evidence.jsonl"), "w") as f:
        f.write("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def test_sparse_raw_ids_round_trip_through_explain(data_dir, capsys):
    _scatter_ids(data_dir, "sparse")
    assert dispatch(["train", "--data", "sparse", "--out", "run"]) == 0
    capsys.readouterr()
    assert dispatch(["explain", "--data", "sparse", "--out", "run", "--user", "100000", "--top", "3"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("Top 3 items for user 100000:")
    ranked = [line.split("\t") for line in out.splitlines()[1:4]]
    assert all(int(item) % 100000 == 7 for _, item, _ in ranked)
    assert f"We recommend item {ranked[0][1]} because" in out
