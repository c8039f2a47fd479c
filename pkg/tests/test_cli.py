import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from agflow import policy as pol
from agflow import scm
from agflow.cli import cli
from agflow.graphs import ARROW_FWD, AncestralGraph
from agflow.scoring import RewardSpec


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared artifacts: datasets plus one small trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()

    g2 = AncestralGraph.from_edges(2, [(0, 1, ARROW_FWD)])
    model2 = scm.random_parameters(g2, seed=1)
    data2 = root / "two.csv"
    data2.write_text(scm.sample_dataset(model2, 300, seed=2).to_csv())

    model3 = scm.random_parameters(scm.preset("fig1"), seed=3)
    data3 = root / "fig1.csv"
    data3.write_text(scm.sample_dataset(model3, 400, seed=4).to_csv())

    ckpt2 = root / "two.npz"
    res = runner.invoke(cli, [
        "train", "--data", str(data2), "--epochs", "40", "--batch", "64",
        "--embed-dim", "16", "--calibration-samples", "100", "--seed", "0",
        "--out-checkpoint", str(ckpt2), "--log", str(root / "two.jsonl"),
    ])
    assert res.exit_code == 0, res.output
    return {"root": root, "data2": data2, "data3": data3, "ckpt2": ckpt2,
            "log2": root / "two.jsonl"}


class TestSimulate:
    def test_preset_columns(self, tmp_path):
        out = tmp_path / "d.csv"
        res = CliRunner().invoke(cli, ["simulate", "--preset", "fig1",
                                       "--samples", "50", "--out", str(out)])
        assert res.exit_code == 0, res.output
        header = out.read_text().splitlines()[0]
        assert header.split(",") == ["V1", "V2", "V3"]
        assert len(out.read_text().splitlines()) == 51
        meta = json.loads((tmp_path / "d.csv.meta.json").read_text())
        assert meta["true_graph"]["edges"] == [[0, 1, 2], [1, 2, 4]]

    def test_seed_reproducible_bytes(self, tmp_path):
        runner = CliRunner()
        outs = []
        for name in ("a.csv", "b.csv"):
            res = runner.invoke(cli, ["simulate", "--nodes", "4", "--seed", "9",
                                      "--samples", "40",
                                      "--out", str(tmp_path / name)])
            assert res.exit_code == 0, res.output
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]

    def test_different_seed_differs(self, tmp_path):
        runner = CliRunner()
        for name, seed in (("a.csv", 1), ("b.csv", 2)):
            runner.invoke(cli, ["simulate", "--preset", "chain4", "--seed",
                                str(seed), "--samples", "30",
                                "--out", str(tmp_path / name)])
        assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "b.csv").read_bytes()

    def test_preset_and_nodes_conflict(self, tmp_path):
        res = CliRunner().invoke(cli, ["simulate", "--preset", "fig1",
                                       "--nodes", "3",
                                       "--out", str(tmp_path / "x.csv")])
        assert res.exit_code == 2

    def test_neither_source_given(self, tmp_path):
        res = CliRunner().invoke(cli, ["simulate", "--out", str(tmp_path / "x.csv")])
        assert res.exit_code == 2


class TestTrain:
    def test_checkpoint_and_log(self, workspace):
        params, meta = pol.load_checkpoint(workspace["ckpt2"])
        assert params.n == 2 and params.d == 16
        spec = RewardSpec.from_json_obj(meta["reward_spec"])
        assert spec.sigma > 0
        lines = [json.loads(x) for x in
                 workspace["log2"].read_text().splitlines()]
        assert lines[0]["config"]["alpha"] == 0.5
        for rec in lines[1:]:
            assert set(rec) == {"epoch", "mean_loss", "mean_reward",
                                "unique_graphs"}

    def test_missing_data_usage_error(self, tmp_path):
        res = CliRunner().invoke(cli, ["train", "--data",
                                       str(tmp_path / "nope.csv"),
                                       "--out-checkpoint",
                                       str(tmp_path / "c.npz")])
        assert res.exit_code == 2

    def test_malformed_data_runtime_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("V1,V2\n1.0,zzz\n2.0,3.0\n")
        res = CliRunner().invoke(cli, ["train", "--data", str(bad),
                                       "--out-checkpoint",
                                       str(tmp_path / "c.npz")])
        assert res.exit_code == 1
        assert "dataset" in res.output


class TestSample:
    def test_report_and_tables(self, workspace, tmp_path):
        out = tmp_path / "samples"
        res = CliRunner().invoke(cli, [
            "sample", "--checkpoint", str(workspace["ckpt2"]), "--data",
            str(workspace["data2"]), "--count", "2000", "--seed", "5",
            "--out", str(out)])
        assert res.exit_code == 0, res.output
        report = json.loads(out.with_suffix(".json").read_text())
        assert report["count"] == 2000
        assert 1 <= report["unique_graphs"] <= 4
        assert len(report["top_by_reward"]) <= 3
        rewards = [e["log_reward"] for e in report["top_by_reward"]]
        assert rewards == sorted(rewards, reverse=True)
        rows = out.with_suffix(".csv").read_text().splitlines()
        assert rows[0].split(",")[:3] == ["rank", "count", "frequency"]
        counts = [int(r.split(",")[1]) for r in rows[1:]]
        assert sum(counts) == 2000

    def test_seed_determinism(self, workspace, tmp_path):
        runner = CliRunner()
        blobs = []
        for name in ("s1", "s2"):
            runner.invoke(cli, [
                "sample", "--checkpoint", str(workspace["ckpt2"]), "--data",
                str(workspace["data2"]), "--count", "500", "--seed", "7",
                "--out", str(tmp_path / name)])
            blobs.append((tmp_path / name).with_suffix(".json").read_bytes())
        assert blobs[0] == blobs[1]


class TestAssess:
    def test_two_node_report(self, workspace, tmp_path):
        out = tmp_path / "assess"
        res = CliRunner().invoke(cli, [
            "assess", "--checkpoint", str(workspace["ckpt2"]), "--data",
            str(workspace["data2"]), "--count", "4000", "--seed", "3",
            "--out", str(out)])
        assert res.exit_code == 0, res.output
        report = json.loads(out.with_suffix(".json").read_text())
        assert 0.0 <= report["total_variation"] <= 1.0
        assert len(report["relation_marginals"]) == 4  # one pair, four classes
        for row in report["relation_marginals"]:
            assert abs(row["exact"] - row["empirical"]) <= 1.0
        exact_mass = sum(r["exact"] for r in report["bic"])
        assert exact_mass == pytest.approx(1.0, abs=1e-9)
        assert "total variation" in res.output

    def test_rejects_large_n(self, tmp_path):
        # a 5-node checkpoint is constructible even though exact comparison
        # is not; the command must refuse cleanly
        g = scm.random_ancestral_structure(5, seed=0)
        model = scm.random_parameters(g, seed=0)
        data = tmp_path / "five.csv"
        data.write_text(scm.sample_dataset(model, 60, seed=0).to_csv())
        params = pol.PolicyParams.init(5, d=8, seed=0)
        ckpt = tmp_path / "five.npz"
        pol.save_checkpoint(ckpt, params, meta={
            "reward_spec": RewardSpec(mu=0.0, sigma=1.0).to_json_obj()})
        res = CliRunner().invoke(cli, [
            "assess", "--checkpoint", str(ckpt), "--data", str(data),
            "--count", "10", "--out", str(tmp_path / "r")])
        assert res.exit_code == 1
        assert "n <= 4" in res.output


class TestElicit:
    def test_trace_outputs(self, workspace, tmp_path):
        out = tmp_path / "elicit"
        res = CliRunner().invoke(cli, [
            "elicit", "--data", str(workspace["data3"]), "--truth", "fig1",
            "--pi", "0.9", "--repeats", "2", "--seed", "1", "--samples", "400",
            "--out", str(out)])
        assert res.exit_code == 0, res.output
        report = json.loads(out.with_suffix(".json").read_text())
        assert len(report["traces"]) == 2
        assert len(report["mean_expected_bic"]) == 4  # step 0 + 3 pairs
        rows = out.with_suffix(".csv").read_text().splitlines()
        assert rows[0].split(",")[0] == "repeat"
        assert len(rows) == 1 + 2 * 4

    def test_uninformative_reliability_flat_trace(self, workspace, tmp_path):
        out = tmp_path / "flat"
        res = CliRunner().invoke(cli, [
            "elicit", "--data", str(workspace["data3"]), "--truth", "fig1",
            "--pi", "0.25", "--repeats", "1", "--seed", "2", "--samples", "300",
            "--out", str(out)])
        assert res.exit_code == 0, res.output
        report = json.loads(out.with_suffix(".json").read_text())
        bices = report["mean_expected_bic"]
        assert np.allclose(bices, bices[0], atol=1e-9)

    def test_truth_from_json_file(self, workspace, tmp_path):
        truth = tmp_path / "truth.json"
        truth.write_text(json.dumps({"n": 3, "edges": [[0, 1, 2], [1, 2, 4]]}))
        res = CliRunner().invoke(cli, [
            "elicit", "--data", str(workspace["data3"]), "--truth", str(truth),
            "--budget", "1", "--samples", "200", "--out", str(tmp_path / "t")])
        assert res.exit_code == 0, res.output

    def test_truth_size_mismatch(self, workspace, tmp_path):
        res = CliRunner().invoke(cli, [
            "elicit", "--data", str(workspace["data2"]), "--truth", "fig1",
            "--samples", "100", "--out", str(tmp_path / "t")])
        assert res.exit_code == 1
        assert "nodes" in res.output

    def test_random_strategy_deterministic(self, workspace, tmp_path):
        runner = CliRunner()
        blobs = []
        for name in ("r1", "r2"):
            res = runner.invoke(cli, [
                "elicit", "--data", str(workspace["data3"]), "--truth", "fig1",
                "--strategy", "random", "--seed", "11", "--samples", "200",
                "--out", str(tmp_path / name)])
            assert res.exit_code == 0, res.output
            blobs.append((tmp_path / name).with_suffix(".json").read_bytes())
        assert blobs[0] == blobs[1]
