import json
import math
import os

import numpy as np
import pytest
from click.testing import CliRunner

from deeplimits.errors import InvalidParameter, NonFinite, SchemaMismatch, UnknownExperiment
from deeplimits.harness import (REGISTRY, ExperimentConfig, RunRecord, emit_plot_data, load,
                                main, monomial_feature_net, persist, run_experiment)
from deeplimits.netdag import ActivationSpec
from deeplimits.functions import hypercube
from deeplimits.rng import make_rng


def _small(name):
    kw = {"parity-gd-fail": dict(n=4, steps=5, width=8),
          "bound-vs-accuracy": dict(ns=[3, 4], steps=5, width=8),
          "monomial-scan": dict(n=5, ks=[1, 3], steps=10),
          "dots-mlp": dict(k=4, train=40, test=40, width=16, epochs=3),
          "parity-sgd-emulate": dict(n=2, t_n=3),
          "ms-gadget": dict(steps=2),
          "sla-tv": dict(n_exact=2, T_max=2, rules=5, n_sgd=4, steps=20, width=8),
          "perturbed-sgd-parity": dict(n=4, steps=20, width=8)}
    return kw[name]


def test_every_experiment_is_tested_small():
    assert set(REGISTRY) == {"parity-gd-fail", "bound-vs-accuracy", "monomial-scan", "dots-mlp",
                             "parity-sgd-emulate", "ms-gadget", "sla-tv", "perturbed-sgd-parity"}


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_deterministic_and_round_trips(name, tmp_path):
    cfg = ExperimentConfig(name, _small(name), seed=7, trials=2)
    a = run_experiment(name, cfg)
    b = run_experiment(name, cfg)
    assert a.canonical() == b.canonical()
    path = persist(a, tmp_path)
    assert load(path) == RunRecord.from_dict(json.loads(json.dumps(a.to_dict())))
    assert load(path).canonical() == a.canonical()


def test_seed_changes_record():
    a = run_experiment("parity-gd-fail", ExperimentConfig("parity-gd-fail", _small("parity-gd-fail"), 1))
    b = run_experiment("parity-gd-fail", ExperimentConfig("parity-gd-fail", _small("parity-gd-fail"), 2))
    assert a.canonical() != b.canonical()


def test_threaded_trials_match_serial():
    cfg = ExperimentConfig("perturbed-sgd-parity", _small("perturbed-sgd-parity"), seed=3, trials=3)
    assert run_experiment("perturbed-sgd-parity", cfg, workers=3).canonical() == \
        run_experiment("perturbed-sgd-parity", cfg).canonical()


def test_degenerate_parity_smoke():
    rec = run_experiment("parity-gd-fail", n=0, steps=3)
    assert rec.summary["accuracy"] == 1.0


def test_unknown_experiment():
    with pytest.raises(UnknownExperiment):
        ExperimentConfig("nope")
    with pytest.raises(InvalidParameter):
        ExperimentConfig("dots-mlp", {"colour": 1})


def test_truncated_file(tmp_path):
    rec = run_experiment("ms-gadget", steps=2)
    path = persist(rec, tmp_path)
    text = open(path).read()
    open(path, "w").write(text[: len(text) // 2])
    with pytest.raises(SchemaMismatch):
        load(path)


def test_schema_version_checked(tmp_path):
    rec = run_experiment("ms-gadget", steps=2)
    d = rec.to_dict()
    d["schema"] = 99
    p = tmp_path / "r.json"
    p.write_text(json.dumps(d))
    with pytest.raises(SchemaMismatch, match="99"):
        load(p)


def test_nan_refused(tmp_path):
    rec = RunRecord({"name": "x", "seed": 0}, {}, {"accuracy": math.nan})
    with pytest.raises(NonFinite):
        persist(rec, tmp_path)
    assert not os.listdir(tmp_path)


def test_plot_data_dots(tmp_path):
    rec = run_experiment("dots-mlp", **_small("dots-mlp"), trials=2)
    paths, warnings = emit_plot_data(rec, tmp_path)
    names = sorted(os.path.basename(p) for p in paths)
    assert names == ["test_error.csv", "train_error.csv", "train_loss.csv"]
    rows = open(tmp_path / "train_error.csv").read().splitlines()
    assert rows[0] == "x,y,y_stderr" and len(rows) == 1 + 3
    assert not warnings


def test_plot_data_empty(tmp_path):
    rec = run_experiment("ms-gadget", steps=2)
    paths, warnings = emit_plot_data(rec, tmp_path)
    assert paths == [] and warnings


def test_bound_series_aligned():
    rec = run_experiment("bound-vs-accuracy", **_small("bound-vs-accuracy"), trials=2)
    acc, ceil = rec.series["accuracy"], rec.series["ceiling"]
    assert acc["x"] == ceil["x"] == [3, 4]
    assert ceil["y"] == [r["ceiling"] for r in rec.summary["rows"]]


def test_monomial_features_are_products():
    net, F = monomial_feature_net(4, 2, make_rng(0))
    assert F == 4 + 6
    act = ActivationSpec.cosine_table(output_identity=True)
    X = hypercube(4)
    plan = net.plan()
    Y, _ = plan.forward(act, net.weights, X)
    units = sorted(set(net.src.tolist()) - {net.constant_vertex, *net.input_vertices})
    prods = {tuple(np.prod(X[:, list(S)], axis=1)) for S in
             [(i,) for i in range(4)] + [(i, j) for i in range(4) for j in range(i + 1, 4)]}
    assert {tuple(Y[:, u]) for u in units} == prods


# ---------------------------------------------------------------- CLI


def test_cli_list():
    res = CliRunner().invoke(main, ["experiment", "list"])
    assert res.exit_code == 0 and "dots-mlp" in res.output


def test_cli_cp():
    res = CliRunner().invoke(main, ["cp", "--n", "4"])
    assert res.exit_code == 0 and json.loads(res.output)["cp"] == 1 / 16


def test_cli_exit_codes(tmp_path):
    r = CliRunner()
    assert r.invoke(main, ["experiment", "run", "nope"]).exit_code == 2
    assert r.invoke(main, ["cp", "--n", "-1"]).exit_code == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    res = r.invoke(main, ["experiment", "run", "ms-gadget", "-p", "steps=2",
                          "--out", str(blocker / "sub")])
    assert res.exit_code == 4
    res = r.invoke(main, ["emulate", "learn", "--n", "2", "--steps", "3", "--preset", "exact"])
    assert res.exit_code == 3


def test_cli_experiment_run_writes(tmp_path):
    res = CliRunner().invoke(main, ["experiment", "run", "ms-gadget", "-p", "steps=2",
                                    "--out", str(tmp_path), "--trials", "2"])
    assert res.exit_code == 0, res.output
    rec = load(tmp_path / "ms-gadget-seed0.json")
    assert rec.config["trials"] == 2


def test_cli_train_sla_bound_emulate():
    r = CliRunner()
    for args in (["train", "gd", "--n", "4", "--steps", "3", "--width", "4"],
                 ["train", "sgd", "--n", "4", "--steps", "3", "--width", "4", "--format", "csv"],
                 ["bound", "--n", "4", "--steps", "3", "--width", "4", "--jf-trials", "2"],
                 ["sla", "--n", "2", "--steps", "2"],
                 ["emulate", "build", "--n", "2", "--steps", "3"],
                 ["emulate", "algebra", "--n", "3"],
                 ["emulate", "learn", "--n", "2", "--steps", "3"]):
        res = r.invoke(main, args)
        assert res.exit_code == 0, (args, res.output)
