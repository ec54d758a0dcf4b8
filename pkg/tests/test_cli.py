import csv
import hashlib
import json

import pytest

from plateletmc import cli
from plateletmc.explore import explore
from plateletmc.mdp import InventoryState, miniature_config
from plateletmc.model import SparseModel
from plateletmc.pctl import evaluate
from plateletmc.policy import constant_policy, random_policy, save_policy

CFG = miniature_config(initial=InventoryState(0, (0, 0, 0, 0, 1), 0, 0))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "mini.json").write_text(json.dumps(CFG.to_dict()))
    save_policy(random_policy((8, 8, 3), 0), root / "net.json")
    return root


def run(work, *argv, out="out"):
    return cli.main([*argv, "--config", str(work / "mini.json"), "--out-dir", str(work / out)])


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# manifest: ")
    return list(csv.DictReader(lines[1:]))


def test_solve_writes_report_policy_and_manifest(work):
    assert run(work, "solve", "--horizon", "6", out="solve") == 0
    rep = json.loads((work / "solve" / "solve_report.json").read_text())
    assert rep["manifest"] == "solve.manifest.json"
    assert rep["initial_state"] == {"d": 0, "x": [0, 0, 0, 0, 1], "pend": 0, "ph": 0}
    assert rep["horizon_unit"] == "steps"
    vals = {r["target"]: r["value"] for r in rep["results"]}
    assert vals["full"] == 0.0 and 0 < vals["empty"] < 1
    man = json.loads((work / "solve" / "solve.manifest.json").read_text())
    for key in ("command", "config_paths", "seeds", "tool_version", "wall_time_s", "peak_memory_mb", "outputs"):
        assert key in man
    assert man["config_paths"] == [str(work / "mini.json")]
    for name, digest in man["outputs"].items():
        assert hashlib.sha256((work / "solve" / name).read_bytes()).hexdigest() == digest
    assert "policy_min_empty_6.npz" in man["outputs"]
    assert run(work, "solve", "--horizon", "3", "--horizon-unit", "days", "--target", "empty", out="solve_d") == 0
    rep_d = json.loads((work / "solve_d" / "solve_report.json").read_text())
    assert rep_d["horizon_steps"] == 6 and rep_d["results"][0]["value"] == vals["empty"]


def test_build_check_sweep_export(work, capsys):
    assert run(work, "build", "--policy", str(work / "net.json"), out="b") == 0
    out = capsys.readouterr().out
    assert "fewer states than the full MDP" in out
    rep = json.loads((work / "b" / "dtmc.report.json").read_text())
    assert rep["mdp"]["states"] == explore(CFG).n_states
    rows = list(csv.DictReader((work / "b" / "dtmc.states.csv").read_text().splitlines()))
    assert len(rows) == rep["dtmc"]["states"]

    model = str(work / "b" / "dtmc.npz")
    assert run(work, "check", model, "--query", 'P=? [ F<=6 "empty" ]', "--query", 'T=? [ F "pr_2" ]', out="c") == 0
    res = json.loads((work / "c" / "check_results.json").read_text())["results"]
    d = SparseModel.load(model)
    assert res[0]["value"] == evaluate(d, 'P=? [ F<=6 "empty" ]').value
    assert res[1]["value"] == "inf" or isinstance(res[1]["value"], float)

    assert run(work, "sweep", model, "--query-template", 'P=? [ F<=B "empty" ]', "--bounds", "0:20:4", out="s") == 0
    rows = read_csv(work / "s" / "sweep.csv")
    assert [int(r["bound"]) for r in rows] == [0, 4, 8, 12, 16, 20]
    vals = [float(r["value"]) for r in rows]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    assert run(work, "sweep", model, "--query-template", 'P=? [ F<=B "empty" ]', "--bounds", "7", out="s1") == 0
    assert len(read_csv(work / "s1" / "sweep.csv")) == 1

    assert run(work, "export", model, out="e") == 0
    man = json.loads((work / "e" / "export.manifest.json").read_text())
    exp = json.loads((work / "e" / "dtmc.export.json").read_text())
    tra = (work / "e" / "dtmc.tra").read_text().splitlines()
    assert len(tra) == exp["counts"]["transitions"] == d.n_transitions
    assert "dtmc.tra" in man["outputs"]


def test_check_batch_csv_and_bind(work):
    assert run(work, "build", "--policy", str(work / "net.json"), "--no-reduction", out="b2") == 0
    model = str(work / "b2" / "dtmc.npz")
    batch = work / "queries.txt"
    batch.write_text('# comment\nP=? [ F<=B "empty" ]\n\nP<=0.5 [ F<=B "full" ]\n')
    assert run(work, "check", model, "--batch", str(batch), "--bind", "B=10", "--format", "csv", out="c2") == 0
    rows = read_csv(work / "c2" / "check_results.csv")
    assert [r["line"] for r in rows] == ["2", "4"]
    assert rows[1]["verdict"] in ("True", "False")


def test_check_parse_error_continues(work, capsys):
    run(work, "build", "--policy", str(work / "net.json"), "--no-reduction", out="b3")
    model = str(work / "b3" / "dtmc.npz")
    code = run(work, "check", model, "--query", 'P=? [ F<=5 "empty"', "--query", 'P=? [ F<=5 "empty" ]', out="c3")
    assert code == cli.EXIT_PARSE
    err = capsys.readouterr().err
    assert "byte 18" in err and "^" in err
    res = json.loads((work / "c3" / "check_results.json").read_text())["results"]
    assert res[0]["offset"] == 18 and "value" in res[1]
    assert json.loads((work / "c3" / "check.manifest.json").read_text())["status"] == "parse_error"
    code = run(work, "check", model, "--query", 'P=? [ F "nope" ]', "--query", 'P=? [ F<=5 "empty" ]', out="c4")
    assert code == cli.EXIT_INVALID
    res = json.loads((work / "c4" / "check_results.json").read_text())["results"]
    assert "error" in res[0] and "value" in res[1]


def test_invalid_inputs_exit_codes(work, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"smax": 0}')
    assert cli.main(["solve", "--config", str(bad), "--out-dir", str(tmp_path)]) == cli.EXIT_INVALID
    assert run(work, "build", "--policy", str(tmp_path / "missing.json"), out="x") == cli.EXIT_INVALID
    assert run(work, "build", "--policy", str(work / "net.json"), "--counterfactual", "1:9", out="x") == cli.EXIT_INVALID
    assert run(work, "solve", "--max-states", "5", out="x") == cli.EXIT_MEMORY
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE


def test_environment_overrides(work, monkeypatch):
    monkeypatch.setenv("PLATELETMC_CONFIG", str(work / "mini.json"))
    monkeypatch.setenv("PLATELETMC_OUT_DIR", str(work / "envout"))
    monkeypatch.setenv("PLATELETMC_SEED", "17")
    assert cli.main(["solve", "--target", "empty", "--horizon", "2"]) == 0
    man = json.loads((work / "envout" / "solve.manifest.json").read_text())
    assert man["seeds"]["seed"] == 17
    assert cli.main(["solve", "--target", "empty", "--horizon", "2", "--seed", "3"]) == 0
    man = json.loads((work / "envout" / "solve.manifest.json").read_text())
    assert man["seeds"]["seed"] == 3


def test_explain_modes(work):
    net = str(work / "net.json")
    q = ["--query", 'P=? [ F<=6 "empty" ]']
    assert run(work, "explain", "--policy", net, "--mode", "prune", "--threads", "2", *q, out="ep") == 0
    rows = read_csv(work / "ep" / "explain_prune.csv")
    assert {r["feature"] for r in rows} == {"d", "x1", "x2", "x3", "x4", "x5", "pend", "ph"}
    # features never set to a nonzero value in decision states cannot change anything
    for r in rows:
        if r["feature"] in ("pend", "ph"):
            assert float(r["relative_change_percent"]) == 0.0

    assert run(work, "explain", "--policy", net, "--mode", "actions", out="ea") == 0
    rep = json.loads((work / "ea" / "explain_actions.json").read_text())
    assert len(rep["rows"]) == 3
    for r in rep["rows"]:
        assert r["never_selected"] == (r["expected_steps"] == "inf")

    save_policy(constant_policy(0, 3), work / "zero.json")
    assert run(work, "explain", "--policy", str(work / "zero.json"), "--mode", "actions", out="ez") == 0
    rep = json.loads((work / "ez" / "explain_actions.json").read_text())
    assert rep["never_selected"] == ["pr_1", "pr_2"]
    assert "inf" in (work / "ez" / "explain_actions.csv").read_text()

    assert run(work, "explain", "--policy", net, "--mode", "permute", "--rounds", "5", out="pm") == 0
    rows = read_csv(work / "pm" / "explain_permute.csv")
    assert abs(sum(float(r["frequency"]) for r in rows) - 1.0) < 1e-12

    assert run(work, "explain", "--policy", net, "--mode", "counterfactual", "--counterfactual", "2:2", *q,
               out="ec") == 0
    rows = read_csv(work / "ec" / "explain_counterfactual.csv")
    assert rows[0]["baseline"] == rows[0]["counterfactual"]
    assert run(work, "explain", "--policy", net, "--mode", "counterfactual", out="ec2") == cli.EXIT_INVALID


def test_counterfactual_build_drops_level(work):
    save_policy(constant_policy(1, 3), work / "one.json")
    assert run(work, "build", "--policy", str(work / "one.json"), "--counterfactual", "pr_1:pr_0",
               "--no-reduction", out="cf") == 0
    d = SparseModel.load(work / "cf" / "dtmc.npz")
    assert not d.label_mask("pr_1").any()
    rep = json.loads((work / "cf" / "dtmc.report.json").read_text())
    assert rep["transform"]["replacement"] == {"1": 0}


def test_absorbing_build_and_sweep_at_target(work, tmp_path):
    cfg = miniature_config(initial=InventoryState(0, (0, 0, 0, 0, 0), 0, 0))
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    common = ["--config", str(tmp_path / "c.json"), "--out-dir", str(tmp_path)]
    assert cli.main(["build", "--policy", str(work / "net.json"), "--absorb", "empty", "--no-reduction", *common]) == 0
    rep = json.loads((tmp_path / "dtmc.report.json").read_text())
    assert rep["absorb"] == "empty" and rep["absorbed_states"] >= 1
    assert rep["dtmc_without_absorb"]["states"] >= rep["dtmc"]["states"]
    assert cli.main(["sweep", str(tmp_path / "dtmc.npz"), "--query-template", 'P=? [ F<=B "empty" ]',
                     "--bounds", "0,3,9", *common]) == 0
    vals = [float(r["value"]) for r in read_csv(tmp_path / "sweep.csv")]
    assert vals == [1.0, 1.0, 1.0]


def test_distill_and_train_commands(work):
    tabs = work / "solve" / "policy_min_empty_6.npz"
    assert run(work, "distill", "--tabular", str(tabs), "--hidden", "16,16", "--lr", "0.003", "--epochs", "200",
               "--eval-episodes", "20", out="dist") == 0
    rep = json.loads((work / "dist" / "distill_report.json").read_text())
    assert rep["agreement"] >= 0.995
    assert (work / "dist" / "policy.json").exists()
    assert run(work, "distill", "--order-step", "1", "--dp-tolerance", "1e-9", "--hidden", "16",
               "--epochs", "200", "--eval-episodes", "20", out="dist2") == 0
    rep = json.loads((work / "dist2" / "distill_report.json").read_text())
    assert rep["dp"]["order_step"] == 1 and rep["reduction_percent"] >= 0
    tc = work / "tc.toml"
    tc.write_text("hidden = [8]\nepisodes = 64\nmax_episode_length = 20\nbatch_size = 16\neval_every = 32\n")
    assert run(work, "train", "--mode", "policy-gradient", "--train-config", str(tc), "--eval-episodes", "10",
               out="pg") == 0
    rows = read_csv(work / "pg" / "train_log.csv")
    assert int(rows[-1]["episode"]) == 64
    tc.write_text("colour = 1\n")
    assert run(work, "train", "--mode", "policy-gradient", "--train-config", str(tc), out="pg2") == cli.EXIT_INVALID


def test_parse_bounds():
    assert cli.parse_bounds("150:400:25") == list(range(150, 401, 25))
    assert cli.parse_bounds("1,5") == [1, 5]
    with pytest.raises(Exception):
        cli.parse_bounds("1:2:0")
