import json
import os

import numpy as np
import pytest

import amlgraph.datagen as dg
import amlgraph.graph as gr
from amlgraph.cli import main


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny end-to-end run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data = str(root / "data")
    code = run("gen-data", "--out-dir", data, "--n-customers", "60",
               "--n-transactions", "400", "--n-communities", "3",
               "--d-customer", "6", "--d-transaction", "4",
               "--seed", "1", "--holdout-boundary", "80.0")
    assert code == 0
    graph = str(root / "graph.bin")
    code = run("build-graph", "--profiles", os.path.join(data, "profiles.jsonl"),
               "--transactions", os.path.join(data, "transactions_train.jsonl"),
               "--out", graph)
    assert code == 0
    model = str(root / "model.bin")
    code = run("train", "--graph", graph, "--out", model,
               "--encoder", "gat", "--layers", "2", "--hidden", "8",
               "--heads", "2", "--batch-size", "32", "--epochs", "2",
               "--fanout", "8", "--seed", "0")
    assert code == 0
    scores = str(root / "scores.jsonl")
    code = run("score", "--graph", graph, "--model", model,
               "--transactions", os.path.join(data, "transactions_test.jsonl"),
               "--out", scores, "--fanout", "8")
    assert code == 0
    return {"root": root, "data": data, "graph": graph, "model": model,
            "scores": scores}


class TestPipeline:
    def test_gen_data_outputs(self, pipeline):
        for name in ("profiles.jsonl", "transactions.jsonl", "labels.jsonl",
                     "transactions_train.jsonl", "transactions_test.jsonl",
                     "manifest.json"):
            assert os.path.isfile(os.path.join(pipeline["data"], name))
        train = gr.load_transactions(
            os.path.join(pipeline["data"], "transactions_train.jsonl"))
        test = gr.load_transactions(
            os.path.join(pipeline["data"], "transactions_test.jsonl"))
        assert len(train) + len(test) == 400
        assert all(t.timestamp < 80.0 for t in train)
        assert all(t.timestamp >= 80.0 for t in test)

    def test_train_artifacts(self, pipeline):
        assert os.path.isfile(pipeline["model"])
        log = pipeline["model"] + ".metrics.log"
        lines = open(log).read().splitlines()
        assert any(line.startswith("epoch=0 ") for line in lines)
        assert lines[-1].startswith("held_out_link_auc=")
        manifest = json.load(open(pipeline["model"] + ".manifest.json"))
        assert manifest["command"] == "train"
        assert pipeline["graph"] in manifest["inputs"]

    def test_score_records(self, pipeline):
        import amlgraph.training as tr
        results = tr.read_results(pipeline["scores"])
        assert results
        test_txns = gr.load_transactions(
            os.path.join(pipeline["data"], "transactions_test.jsonl"))
        expected = sum((t.source_customer != gr.EXTERNAL)
                       + (t.dest_customer != gr.EXTERNAL) for t in test_txns)
        assert len(results) == expected
        for r in results:
            assert (r.anomaly_score is None) == r.cold_start
            if not r.cold_start:
                assert 0.0 < r.y_hat < 1.0

    def test_evaluate_report(self, pipeline):
        report_path = str(pipeline["root"] / "report.json")
        roc_path = str(pipeline["root"] / "roc.tsv")
        code = run("evaluate", "--scores", pipeline["scores"],
                   "--labels", os.path.join(pipeline["data"], "labels.jsonl"),
                   "--out", report_path, "--roc", roc_path)
        assert code == 0
        report = json.load(open(report_path))
        assert 0.0 <= report["roc_auc"] <= 1.0
        assert report["n_transactions"] > 0
        assert open(roc_path).readline().strip() == "fpr\ttpr\tthreshold"

    def test_embed_and_diverge(self, pipeline):
        emb1 = str(pipeline["root"] / "emb1.tsv")
        assert run("embed", "--graph", pipeline["graph"], "--model",
                   pipeline["model"], "--out", emb1) == 0
        model2 = str(pipeline["root"] / "model2.bin")
        assert run("train", "--graph", pipeline["graph"], "--out", model2,
                   "--encoder", "sage", "--layers", "2", "--hidden", "8",
                   "--heads", "1", "--batch-size", "32", "--epochs", "1",
                   "--fanout", "8", "--seed", "7") == 0
        emb2 = str(pipeline["root"] / "emb2.tsv")
        assert run("embed", "--graph", pipeline["graph"], "--model", model2,
                   "--out", emb2) == 0
        report = str(pipeline["root"] / "drift.jsonl")
        assert run("diverge", "--embeddings", emb1, emb2,
                   "--out", report) == 0
        rows = [json.loads(line) for line in open(report)]
        assert len(rows) == 60
        for row in rows:
            m = np.array(row["similarity"])
            assert m.shape == (2, 2)
            assert np.array_equal(m, m.T)
        # identical snapshots never diverge
        same = str(pipeline["root"] / "same.jsonl")
        assert run("diverge", "--embeddings", emb1, emb1, "--out", same) == 0
        assert not any(json.loads(line)["diverging"] for line in open(same))


class TestHandScores:
    def test_known_auc(self, tmp_path):
        scores = tmp_path / "scores.jsonl"
        labels = tmp_path / "labels.jsonl"
        rows = [("t0", 0.1, False), ("t1", 0.4, False),
                ("t2", 0.35, True), ("t3", 0.8, True)]
        with open(scores, "w") as fh:
            for tid, s, _ in rows:
                fh.write(json.dumps({
                    "txn_id": tid, "direction": gr.OUTGOING,
                    "customer_id": "c0", "y_hat": 1.0 - s,
                    "anomaly_score": s, "cold_start": False}) + "\n")
        with open(labels, "w") as fh:
            for tid, _, flag in rows:
                fh.write(json.dumps({"txn_id": tid, "anomaly": flag,
                                     "src_community": 0,
                                     "dst_community": 1}) + "\n")
        out = tmp_path / "report.json"
        assert run("evaluate", "--scores", str(scores), "--labels",
                   str(labels), "--out", str(out)) == 0
        report = json.load(open(out))
        assert report["roc_auc"] == 0.75
        assert report["n_flagged"] == 2

    def test_scored_txn_missing_label(self, tmp_path):
        scores = tmp_path / "scores.jsonl"
        labels = tmp_path / "labels.jsonl"
        scores.write_text(json.dumps({
            "txn_id": "tX", "direction": gr.OUTGOING, "customer_id": "c0",
            "y_hat": 0.5, "anomaly_score": 0.5, "cold_start": False}) + "\n")
        labels.write_text(json.dumps({"txn_id": "t0", "anomaly": False,
                                      "src_community": 0,
                                      "dst_community": 0}) + "\n")
        assert run("evaluate", "--scores", str(scores), "--labels",
                   str(labels), "--out", str(tmp_path / "r.json")) == 2


class TestColdStart:
    def test_unknown_customer_scores_cleanly(self, pipeline, tmp_path):
        new = tmp_path / "new.jsonl"
        gr.write_transactions(str(new), [
            gr.RawTransaction("fresh0", "c000001", "stranger", 99.0,
                              [1.0, 0.0, 0.0, 0.0])])
        out = tmp_path / "scores.jsonl"
        code = run("score", "--graph", pipeline["graph"], "--model",
                   pipeline["model"], "--transactions", str(new),
                   "--out", str(out), "--fanout", "8")
        assert code == 0
        import amlgraph.training as tr
        results = tr.read_results(str(out))
        by_dir = {r.direction: r for r in results}
        assert not by_dir[gr.OUTGOING].cold_start
        assert by_dir[gr.INCOMING].cold_start


class TestManifests:
    def test_deterministic_bytes(self, tmp_path):
        args = ["gen-data", "--n-customers", "30", "--n-transactions", "100",
                "--n-communities", "2", "--d-customer", "6",
                "--d-transaction", "3", "--seed", "3"]
        d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert run(*args, "--out-dir", d1) == 0
        m1_first = open(os.path.join(d1, "manifest.json"), "rb").read()
        assert run(*args, "--out-dir", d1) == 0   # rerun in place
        m1_second = open(os.path.join(d1, "manifest.json"), "rb").read()
        assert m1_first == m1_second
        assert run(*args, "--out-dir", d2) == 0
        t1 = open(os.path.join(d1, "transactions.jsonl"), "rb").read()
        t2 = open(os.path.join(d2, "transactions.jsonl"), "rb").read()
        assert t1 == t2

    def test_input_digests_recorded(self, pipeline):
        import hashlib
        manifest = json.load(open(pipeline["scores"] + ".manifest.json"))
        digest = manifest["inputs"][pipeline["graph"]]
        actual = hashlib.sha256(open(pipeline["graph"], "rb").read()).hexdigest()
        assert digest == actual
        assert manifest["version"]
        assert manifest["outputs"] == [pipeline["scores"]]


class TestConfigFile:
    def test_file_then_flag_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n-customers": 50, "n-transactions": 80,
                                   "n-communities": 2, "d-customer": 6,
                                   "d-transaction": 3, "seed": 5}))
        out = str(tmp_path / "data")
        assert run("gen-data", "--out-dir", out, "--config", str(cfg),
                   "--n-customers", "40") == 0
        profiles = gr.load_profiles(os.path.join(out, "profiles.jsonl"))
        txns = gr.load_transactions(os.path.join(out, "transactions.jsonl"))
        assert len(profiles) == 40    # flag wins
        assert len(txns) == 80        # file fills the rest

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n-custmers": 50}))
        assert run("gen-data", "--out-dir", str(tmp_path / "d"),
                   "--config", str(cfg)) == 1

    def test_invalid_json_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{nope")
        assert run("gen-data", "--out-dir", str(tmp_path / "d"),
                   "--config", str(cfg)) == 1


class TestExitCodes:
    def test_config_error_is_1(self, tmp_path):
        assert run("gen-data", "--out-dir", str(tmp_path / "d"),
                   "--n-customers", "1") == 1

    def test_missing_input_is_2(self, tmp_path):
        assert run("build-graph", "--profiles", "/nonexistent.jsonl",
                   "--transactions", "/nonexistent.jsonl",
                   "--out", str(tmp_path / "g.bin")) == 2

    def test_bad_ratios_are_1(self, pipeline, tmp_path):
        assert run("train", "--graph", pipeline["graph"],
                   "--out", str(tmp_path / "m.bin"),
                   "--message-ratio", "0.9", "--supervision-ratio", "0.9",
                   "--validation-ratio", "0.2") == 1

    def test_unknown_flag_is_1(self, tmp_path):
        assert run("gen-data", "--out-dir", str(tmp_path / "d"),
                   "--no-such-flag", "7") == 1
