import json

import pytest

from reachplan.cli import main


def _jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_pipeline(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["gen-data", "--scenario", "plug2", "--episodes", "200", "--seed", "3", "--out", str(out)]) == 0
    data = out / "dataset.jsonl"
    assert data.exists() and (out / "gen-data.md").exists()
    assert main(["fit-proposal", "--data", str(data), "--out", str(out)]) == 0
    assert main(["train-value", "--data", str(data), "--out", str(out), "--pessimistic", "--epochs", "50"]) == 0
    assert _jsonl(out / "train-value.jsonl")[0]["tau_e"] == 0.3
    assert (out / "loss.jsonl").read_text().count("\n") == 50
    for method in ("full", "chain", "dfs", "tree-no-fail"):
        dest = out / method
        rc = main(["plan", "--scenario", "plug2", "--proposal", str(out / "proposal.tsv"),
                   "--value", str(out / "value.txt"), "--method", method, "--k", "2", "--M", "6", "--out", str(dest)])
        assert rc == 0
        rec = _jsonl(dest / "plan.jsonl")[0]
        assert rec["method"] == method and 0.0 <= rec["plan_prob"] <= 1.0
        assert (dest / "plan.txt").exists()


def test_gen_data_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "--scenario", "plug2", "--episodes", "50", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "dataset.jsonl").read_text() == (tmp_path / "b" / "dataset.jsonl").read_text()


def test_run_bench_with_config(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("scenario: drawer-can\nn_episodes: 100\nn_eval: 30\ntrain: {epochs: 40}\nmethods: [chain, full]\n")
    out = tmp_path / "bench"
    assert main(["run-bench", "--config", str(cfg), "--seed", "2", "--k", "2", "--out", str(out)]) == 0
    recs = _jsonl(out / "run-bench.jsonl")
    assert [r["method"] for r in recs] == ["chain", "full"] and all(r["seed"] == 2 for r in recs)
    saved = json.loads((out / "config.json").read_text())
    assert saved["search"]["k"] == 2 and saved["hash"] == recs[0]["config_hash"]
    assert (out / "run-bench.md").read_text().startswith("# run-bench")


@pytest.mark.parametrize("cmd", ["scaling-sweep", "replan-ablation", "compare-search"])
def test_experiment_commands(tmp_path, cmd):
    scenario = {"scaling-sweep": "drawer-can:unseen", "replan-ablation": "drawer-replan", "compare-search": "plug2"}[cmd]
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"scenario: '{scenario}'\nn_episodes: 100\nn_eval: 20\nks: [1, 2]\ntrain: {{epochs: 40}}\n")
    extra = ["--replan", "--kappa-u", "0.8", "--lambda-down", "0.3"] if cmd == "replan-ablation" else []
    assert main([cmd, "--config", str(cfg), "--out", str(tmp_path), *extra]) == 0
    recs = _jsonl(tmp_path / f"{cmd}.jsonl")
    assert recs
    if cmd == "replan-ablation":
        assert [r["method"] for r in recs] == ["replan-on"] and recs[0]["kappa_u"] == 0.8


def test_calibrate_and_solve(tmp_path):
    assert main(["calibrate", "--scenario", "plug2", "--out", str(tmp_path)]) == 0
    assert all(r["ok"] for r in _jsonl(tmp_path / "calibrate.jsonl"))
    assert main(["solve", "--scenario", "plug2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "solution.txt").read_text().startswith("# mode=optimal")


@pytest.mark.parametrize(
    "argv",
    [
        ["plan", "--scenario", "plug2", "--proposal", "missing.tsv"],
        ["fit-proposal", "--data", "missing.jsonl"],
        ["run-bench", "--config", "missing.yaml"],
        ["gen-data", "--scenario", "atlantis"],
        ["run-bench", "--method", "external"],
    ],
)
def test_errors_exit_nonzero(tmp_path, capsys, argv):
    assert main([*argv, "--out", str(tmp_path)]) != 0
    assert "error:" in capsys.readouterr().err


def test_invalid_config_values(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("scenario: plug2\nn_eval: 0\n")
    assert main(["run-bench", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    cfg.write_text("scenario: plug2\nmystery: 1\n")
    assert main(["run-bench", "--config", str(cfg), "--out", str(tmp_path)]) == 2
