import json

import numpy as np
import pandas as pd
import pytest
import yaml
from nmfnet.cli import run
from nmfnet.config import ExperimentConfig, write_run_record
from nmfnet.graph import DirectedNetwork, save_network


def nmf(*argv):
    return run(["--threads", "1", *map(str, argv)])


@pytest.fixture
def workflow(tmp_path):
    net, data, ckpt = tmp_path / "net.txt", tmp_path / "data.jsonl", tmp_path / "ckpt.json"
    assert nmf("gen-net", "--model", "random", "--nodes", 6, "--edges", 12, "--seed", 1, "--out", net) == 0
    assert nmf(
        "simulate", "--net", net, "--sources", 20, "--per-source", 5, "--size-hi", 2,
        "--horizon", 5, "--seed", 2, "--out", data,
    ) == 0
    assert nmf(
        "train", "--data", data, "--epochs", 2, "--hidden", "4,4,4", "--horizon", 5,
        "--out", ckpt, "--log", tmp_path / "log.csv",
    ) == 0
    return tmp_path


def test_help_and_usage_errors(capsys):
    assert run(["--help"]) == 0
    assert run(["train", "--help"]) == 0
    assert run(["--no-such-flag"]) == 1
    assert run(["train", "--variant", "lstm"]) == 1
    assert run([]) == 1


def test_missing_required_option(tmp_path):
    assert nmf("train", "--data", tmp_path / "data.jsonl") == 1
    assert nmf("oracle", "--net", tmp_path / "net.txt") == 1


def test_workflow(workflow):
    tmp = workflow
    assert (tmp / "net.txt.run.yaml").exists()
    record = yaml.safe_load((tmp / "ckpt.json.run.yaml").read_text())
    assert record["command"] == "train"
    assert record["args"]["epochs"] == 2 and record["args"]["seed"] == 0
    log = pd.read_csv(tmp / "log.csv")
    assert list(log.columns) == ["epoch", "train_loss", "val_prob_mae", "wall_seconds"]

    assert nmf("estimate", "--ckpt", tmp / "ckpt.json", "--source", "0,1", "--T", 3, "--out", tmp / "est.csv") == 0
    est = pd.read_csv(tmp / "est.csv")
    assert list(est.columns) == ["t", "node", "prob"]
    assert len(est) == 18
    assert est["prob"].between(0, 1).all()

    assert nmf("eval-net", "--ckpt", tmp / "ckpt.json", "--truth-net", tmp / "net.txt", "--out", tmp / "m.json") == 0
    metrics = json.loads((tmp / "m.json").read_text())
    assert {"precision", "recall", "accuracy", "correlation", "threshold"} <= set(metrics)
    assert metrics["threshold"] == 0.01

    assert nmf(
        "maximize", "--ckpt", tmp / "ckpt.json", "--t", 3, "--budget", 2, "--eval-net", tmp / "net.txt",
        "--samples", 100, "--out", tmp / "im.json",
    ) == 0
    im = json.loads((tmp / "im.json").read_text())
    assert len(im["picks"]) == 2 and len(set(im["picks"])) == 2
    assert 2 <= im["influence"] <= 6


def test_eval_prob(workflow):
    tmp = workflow
    assert nmf("oracle", "--net", tmp / "net.txt", "--source", "0", "--grid-T", 4, "--out", tmp / "oracle.csv") == 0
    (tmp / "sources.txt").write_text("0\n")
    assert nmf(
        "eval-prob", "--ckpt", tmp / "ckpt.json", "--oracle", tmp / "oracle.csv",
        "--sources", tmp / "sources.txt", "--out", tmp / "mae.csv",
    ) == 0
    mae = pd.read_csv(tmp / "mae.csv")
    assert mae["t"].tolist() == [1, 2, 3, 4]
    assert mae["prob_mae"].between(0, 1).all()


def test_oracle_two_node_csv(tmp_path):
    save_network(DirectedNetwork.from_edges(2, [(0, 1, 1.0)]), tmp_path / "two.txt")
    assert nmf("oracle", "--net", tmp_path / "two.txt", "--source", "0", "--grid-T", 1, "--out", tmp_path / "o.csv") == 0
    frame = pd.read_csv(tmp_path / "o.csv")
    assert frame["prob"].tolist() == pytest.approx([1.0, 1 - np.exp(-1.0)], abs=1e-6)

    (tmp_path / "sources.txt").write_text("0\n1\n")
    assert nmf(
        "oracle", "--net", tmp_path / "two.txt", "--sources", tmp_path / "sources.txt", "--method", "mc",
        "--samples", 200, "--grid-T", 2, "--out", tmp_path / "mc.csv",
    ) == 0
    frame = pd.read_csv(tmp_path / "mc.csv", dtype={"source": str})
    assert list(frame.columns) == ["source", "t", "node", "prob", "se"]
    assert set(frame["source"]) == {"0", "1"}


def test_bad_network_file(tmp_path):
    (tmp_path / "bad.txt").write_text("n=3\n0\t1\tfast\n")
    assert nmf("oracle", "--net", tmp_path / "bad.txt", "--source", "0") == 2
    assert nmf("oracle", "--net", tmp_path / "missing.txt", "--source", "0") == 2


def test_exact_oracle_too_large(tmp_path):
    save_network(DirectedNetwork.from_edges(20, [(0, 1, 1.0)]), tmp_path / "big.txt")
    assert nmf("oracle", "--net", tmp_path / "big.txt", "--source", "0") == 1


def test_gradcheck(capsys):
    assert nmf("gradcheck", "--instances", 2) == 0
    worst = float(capsys.readouterr().out.strip().splitlines()[-1])
    assert worst < 1e-4


def test_simulate_is_deterministic(tmp_path):
    net = tmp_path / "net.txt"
    assert nmf("gen-net", "--model", "core", "--nodes", 8, "--edges", 20, "--out", net) == 0
    for threads, name in ((1, "a.jsonl"), (2, "b.jsonl")):
        assert run([
            "--threads", str(threads), "simulate", "--net", str(net), "--sources", "30", "--per-source", "2",
            "--size-hi", "4", "--seed", "9", "--out", str(tmp_path / name),
        ]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_config_pipeline_resolves_relative_paths(tmp_path, monkeypatch):
    config = {
        "seed": 3,
        "threads": 1,
        "pipeline": ["gen-net", "simulate"],
        "gen-net": {"model": "random", "nodes": 5, "edges": 10, "out": "net.txt"},
        "simulate": {"net": "net.txt", "sources": 5, "per-source": 2, "size-hi": 2, "horizon": 3, "out": "data.jsonl"},
    }
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(config))
    monkeypatch.chdir(tmp_path.parent)
    assert run(["--config", str(path), "pipeline"]) == 0
    assert (tmp_path / "net.txt").exists()
    assert len((tmp_path / "data.jsonl").read_text().splitlines()) == 10
    record = yaml.safe_load((tmp_path / "data.jsonl.run.yaml").read_text())
    assert record["args"]["seed"] == 3


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump({"train": {"learning-rate": 0.1}}))
    assert run(["--config", str(path), "train"]) == 1
    path.write_text(yaml.safe_dump({"fit": {"lr": 0.1}}))
    assert run(["--config", str(path), "train"]) == 1
    path.write_text(yaml.safe_dump({"pipeline": ["gen-net", "bogus"]}))
    assert run(["--config", str(path), "pipeline"]) == 1
    assert run(["pipeline"]) == 1


@pytest.mark.slow
def test_reproduce_smoke(tmp_path):
    assert nmf("reproduce", "--suite", "smoke", "--out", tmp_path / "results") == 0
    checks = pd.read_csv(tmp_path / "results" / "smoke_checks.csv")
    assert checks["passed"].all()


def test_config_joins_only_path_options(tmp_path):
    doc = {
        "simulate": {"sources": 5, "net": "net.txt"},
        "oracle": {"sources": "sources.txt"},
        "eval_prob": {"sources": "sources.txt"},
    }
    config = ExperimentConfig.from_dict(doc, tmp_path / "experiment.yaml")
    assert config.section("simulate") == {"sources": 5, "net": str(tmp_path / "net.txt")}
    assert config.section("oracle") == {"sources": str(tmp_path / "sources.txt")}
    assert config.section("eval-prob") == {"sources": str(tmp_path / "sources.txt")}


def test_config_value_of_wrong_type(tmp_path):
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump({"gen-net": {"nodes": [5, 6], "out": "net.txt"}}))
    assert run(["--config", str(path), "gen-net"]) == 1


def test_run_record_inside_output_directory(tmp_path):
    write_run_record(tmp_path, "reproduce", {"suite": "smoke", "out": tmp_path})
    record = yaml.safe_load((tmp_path / "run.yaml").read_text())
    assert record["command"] == "reproduce"
    assert record["args"] == {"suite": "smoke", "out": str(tmp_path)}
