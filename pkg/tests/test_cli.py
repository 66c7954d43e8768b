import csv
import hashlib
import json

import numpy as np
import pytest

from stratarm import montecarlo
from stratarm.cli import main
from stratarm.design import Design, assign_matched_tuples
from stratarm.core import Propensity


def write_csv(path, columns):
    names = list(columns)
    n = len(columns[names[0]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(n):
            w.writerow([columns[c][i] for c in names])
    return path


@pytest.fixture
def units(tmp_path):
    rng = np.random.default_rng(0)
    n = 40
    psi = rng.standard_normal((n, 2))
    return write_csv(tmp_path / "units.csv", {
        "psi_1": psi[:, 0], "psi_2": psi[:, 1], "stratum": np.repeat([0, 1], n // 2),
    }), psi


def experiment_csv(tmp_path, design, psi, name="exp.csv"):
    rng = np.random.default_rng(1)
    n = len(psi)
    h = psi[:, 0] + rng.standard_normal(n)
    d = design.treatment
    y = 1.0 * d + 2 * h + rng.standard_normal(n)
    uptake = d * (rng.random(n) < 0.8)
    return write_csv(tmp_path / name, {
        "y": y, "d": d, "psi_1": psi[:, 0], "psi_2": psi[:, 1], "h_1": h, "z_1": psi[:, 1],
        "d_actual": uptake.astype(int), "grp": design.labels,
    })


def groups_hash(groups):
    return hashlib.sha256(json.dumps(sorted(sorted(int(i) for i in g) for g in groups)).encode()).hexdigest()


def test_design_writes_json(units, tmp_path, capsys):
    path, psi = units
    out = tmp_path / "design.json"
    assert main(["design", "--in", str(path), "--prop", "1/2", "--seed", "7", "--out", str(out)]) == 0
    obj = json.loads(out.read_text())
    assert len(obj["groups"]) == 20
    assert obj["meta"]["seed"] == 7 and obj["meta"]["tool"] == "stratarm"
    assert "homogeneity_score" in capsys.readouterr().out


def test_design_rejects_non_reduced_propensity(units):
    path, _ = units
    assert main(["design", "--in", str(path), "--prop", "2/4"]) == 2


def test_design_coarse(units, tmp_path):
    path, _ = units
    out = tmp_path / "coarse.json"
    assert main(["design", "--in", str(path), "--prop", "1/2", "--coarse-col", "stratum", "--out", str(out)]) == 0
    groups = json.loads(out.read_text())["groups"]
    assert len(groups) == 20
    assert all((max(g) < 20) == (min(g) < 20) for g in groups)


def test_stratum_too_small(tmp_path):
    path = write_csv(tmp_path / "u.csv", {"psi_1": [0.0, 1.0, 2.0], "stratum": [0, 0, 1]})
    assert main(["design", "--in", str(path), "--prop", "1/2", "--coarse-col", "stratum"]) == 3


def test_missing_file():
    assert main(["design", "--in", "/nonexistent.csv", "--prop", "1/2"]) == 2


def test_seed_from_environment(units, tmp_path, monkeypatch):
    path, _ = units
    monkeypatch.setenv("STRATARM_SEED", "11")
    main(["design", "--in", str(path), "--prop", "1/2", "--out", str(tmp_path / "a.json")])
    main(["design", "--in", str(path), "--prop", "1/2", "--seed", "3", "--out", str(tmp_path / "b.json")])
    assert json.loads((tmp_path / "a.json").read_text())["meta"]["seed"] == 11
    assert json.loads((tmp_path / "b.json").read_text())["meta"]["seed"] == 3


def test_design_estimate_round_trip(units, tmp_path, capsys):
    path, psi = units
    dpath = tmp_path / "design.json"
    main(["design", "--in", str(path), "--prop", "1/2", "--seed", "5", "--out", str(dpath)])
    design = Design.from_json(dpath.read_text())
    exp = experiment_csv(tmp_path, design, psi)
    out = tmp_path / "est.json"
    code = main(["estimate", "--in", str(exp), "--design", str(dpath), "--est", "plin,lin,go",
                 "--alpha", "0.05", "--out", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    assert sum(line.startswith(("plin", "lin", "go")) for line in text.splitlines()) == 3
    res = json.loads(out.read_text())
    assert [r["estimator"] for r in res["results"]] == ["plin", "lin", "go"]
    # the same groups come back through the group-label column
    code = main(["estimate", "--in", str(exp), "--groups-col", "grp", "--est", "plin", "--out", str(tmp_path / "g.json")])
    assert code == 0
    via_labels = json.loads((tmp_path / "g.json").read_text())["results"][0]
    assert via_labels["tau"] == pytest.approx(res["results"][0]["tau"])
    relabelled = Design.from_labels(np.loadtxt(exp, delimiter=",", skiprows=1, usecols=7), design.treatment)
    assert groups_hash(relabelled.groups) == groups_hash(design.groups)


def test_estimate_adaptive_and_late(units, tmp_path, capsys):
    path, psi = units
    design = assign_matched_tuples(psi, Propensity(1, 2), rng_seed=2)
    exp = experiment_csv(tmp_path, design, psi)
    assert main(["estimate", "--in", str(exp), "--groups-col", "grp", "--est", "adaptive", "--with-z", "--ehw"]) == 0
    assert "branch=" in capsys.readouterr().out
    assert main(["estimate", "--in", str(exp), "--groups-col", "grp", "--est", "plin,go,tom",
                 "--late", "--uptake-col", "d_actual"]) == 0
    assert main(["estimate", "--in", str(exp), "--groups-col", "grp", "--est", "lin", "--late",
                 "--uptake-col", "d_actual"]) == 2
    assert main(["estimate", "--in", str(exp), "--groups-col", "grp", "--est", "ridge"]) == 2


def test_simulate(tmp_path):
    cfg = tmp_path / "grid.toml"
    cfg.write_text('n = 60\ndim_psi = 2\nreps = 3\nestimators = ["unadj", "plin", "lin+z"]\n'
                   "[[scenario]]\nmodel_id = 1\n[[scenario]]\nmodel_id = 4\n")
    stem = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--out", str(stem), "--seed", "2"]) == 0
    obj = json.loads((tmp_path / "out.json").read_text())
    assert set(obj["excess_risk"]) == {"unadj", "plin", "lin+z"}
    assert obj["meta"]["seed"] == 2
    lines = (tmp_path / "out.csv").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 2 + 6


def test_simulate_bad_key(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("n = 60\nflavour = 3\n")
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "flavour" in capsys.readouterr().err


def test_simulate_unknown_model(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model_id": 42, "reps": 1}))
    assert main(["simulate", "--config", str(cfg)]) == 2


def test_simulate_budget_breach(tmp_path, monkeypatch):
    def broken(scenario, rep):
        raise montecarlo.StratarmError("broken replication")

    monkeypatch.setattr(montecarlo, "_run_rep", broken)
    cfg = tmp_path / "c.toml"
    cfg.write_text("n = 40\nreps = 5\n")
    assert main(["simulate", "--config", str(cfg)]) == 4


def test_replay(units, tmp_path):
    path, psi = units
    design = assign_matched_tuples(psi, Propensity(1, 2), rng_seed=2)
    exp = experiment_csv(tmp_path, design, psi)
    stem = tmp_path / "replay"
    assert main(["replay", "--in", str(exp), "--design", "matched:1/2", "--reps", "5",
                 "--est", "unadj,plin", "--with-z", "--out", str(stem)]) == 0
    rows = json.loads((tmp_path / "replay.json").read_text())["results"][0]["estimators"]
    assert [r["estimator"] for r in rows] == ["unadj", "plin+z"]
    assert main(["replay", "--in", str(exp), "--design", "pairs"]) == 2
