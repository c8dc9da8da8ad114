import csv
import json

import numpy as np
import pytest
import yaml

from ordinal_gps import (
    ConfigError,
    EmptyAfterFiltering,
    SchemaMismatch,
    SeparationDetected,
    UnparseableValue,
    ingest,
    load_config,
    run_analysis,
    run_simulation,
)
from ordinal_gps.cli import main
from ordinal_gps.config import from_mapping
from ordinal_gps.synthetic import linear_outcome_data, randomized_data

LEVELS = ["never", "rarely", "sometimes", "often", "always"]


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def dataset_csv(path, data, labels=None):
    labels = labels or [str(z) for z in range(1, data.Z + 1)]
    header = ["id"] + [f"x{j + 1}" for j in range(data.p)] + ["level", "y"]
    rows = [
        [int(i)] + [f"{v:.17g}" for v in x] + [labels[t - 1], f"{y:.17g}"]
        for i, x, t, y in zip(data.ids, data.x, data.t, data.y)
    ]
    return write_csv(path, header, rows)


def config_for(path, p, **extra):
    doc = {
        "input": str(path),
        "outcome": "y",
        "id_column": "id",
        "treatment": {"column": "level"},
        "covariates": [{"name": f"x{j + 1}", "type": "numeric", "role": "gps"} for j in range(p)],
        "bootstrap_B": 20,
    }
    doc.update(extra)
    return from_mapping(doc)


# --------------------------------------------------------------------------- #
# ingestion
# --------------------------------------------------------------------------- #


def test_missing_cell_drops_row(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["x1", "level", "y"], [["1.5", "1", "3"], ["NA", "2", "4"], ["0.5", "2", "5"]])
    data, report = ingest(path, config_for(path, 1, id_column=None))
    assert data.n == 2
    assert report.dropped_missing == 1
    assert report.rows_read == report.retained + report.dropped_missing


def test_label_outside_declared_levels(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["x1", "level", "y"], [["1", "never", "3"], ["2", "sometimes", "4"], ["3", "daily", "5"]])
    cfg = config_for(path, 1, id_column=None, treatment={"column": "level", "levels": LEVELS})
    with pytest.raises(UnparseableValue) as info:
        ingest(path, cfg)
    assert "row 4" in str(info.value) and "level" in str(info.value)


def test_level_ordering_follows_declaration(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["x1", "level", "y"], [["1", "always", "3"], ["2", "never", "4"]])
    cfg = config_for(path, 1, id_column=None, treatment={"column": "level", "levels": LEVELS})
    data, _ = ingest(path, cfg)
    assert data.t.tolist() == [5, 1]
    assert data.level_labels == tuple(LEVELS)


def test_binary_and_ordinal_parsing(tmp_path):
    path = write_csv(
        tmp_path / "d.csv", ["smoker", "edu", "level", "y"],
        [["yes", "hs", "1", "1"], ["0", "college", "2", "2"], ["False", "none", "2", "2"]],
    )
    cfg = from_mapping({
        "input": str(path), "outcome": "y", "treatment": "level",
        "covariates": [
            {"name": "smoker", "type": "binary"},
            {"name": "edu", "type": "ordinal", "levels": ["none", "hs", "college"]},
        ],
    })
    data, _ = ingest(path, cfg)
    assert data.x.tolist() == [[1.0, 1.0], [0.0, 2.0], [0.0, 0.0]]
    assert data.kinds == ("binary", "ordinal")


def test_schema_errors(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["x1", "level", "y"], [["1", "1", "3"]])
    with pytest.raises(SchemaMismatch):
        ingest(path, config_for(path, 2, id_column=None))
    bad = write_csv(tmp_path / "b.csv", ["x1", "level", "y"], [["abc", "1", "3"]])
    with pytest.raises(UnparseableValue):
        ingest(bad, config_for(bad, 1, id_column=None))
    empty = write_csv(tmp_path / "e.csv", ["x1", "level", "y"], [["", "1", "3"]])
    with pytest.raises(EmptyAfterFiltering):
        ingest(empty, config_for(empty, 1, id_column=None))


def test_audit_does_not_need_outcome(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["x1", "level"], [["1", "1"], ["2", "2"]])
    cfg = from_mapping({"mode": "audit", "input": str(path), "treatment": "level", "covariates": ["x1"]})
    data, _ = ingest(path, cfg, require_outcome=False)
    assert data.y is None


def test_config_validation():
    with pytest.raises(ConfigError):
        from_mapping({"synthetic": {"n": 100}, "K": [0]})
    with pytest.raises(ConfigError):
        from_mapping({"synthetic": {"n": 100}, "alpha": 1.5})
    with pytest.raises(ConfigError):
        from_mapping({"synthetic": {"n": 100}, "colour": "blue"})
    with pytest.raises(ConfigError):
        from_mapping({"input": "x.csv", "treatment": "t", "covariates": [{"name": "a", "role": "owner"}]})


def test_config_hash_tracks_content():
    a = from_mapping({"synthetic": {"n": 100}, "seed": 1})
    assert a.hash() == from_mapping({"seed": 1, "synthetic": {"n": 100}}).hash()
    assert a.hash() != a.with_seed(2).hash()


# --------------------------------------------------------------------------- #
# analysis
# --------------------------------------------------------------------------- #


def test_randomized_data_passes_gate(tmp_path):
    data = randomized_data(1500, 3, 3, seed=4, effect_step=0.5)
    path = dataset_csv(tmp_path / "r.csv", data)
    report = run_analysis(config_for(path, 3, K=[1, 3, 5], adjustment=["A2"]))
    d = report.to_dict()
    assert report.exit_code == 0
    for design in d["designs"]:
        assert design["gate"]["passed"]
        reg = design["effects"]["subclass_regression_A2"]
        naive = {(p["t"], p["s"]): p for p in d["comparators"]["naive"]["pairs"]}
        for pair in reg["pairs"]:
            ref = naive[(pair["t"], pair["s"])]
            assert abs(pair["estimate"] - ref["estimate"]) < 2 * ref["se"]


def test_separation_surfaces_with_stage(tmp_path):
    x = np.linspace(-3, 3, 90)
    t = np.digitize(x, [-1, 1]) + 1
    path = write_csv(tmp_path / "s.csv", ["x1", "level", "y"], [[f"{a}", str(b), "0"] for a, b in zip(x, t)])
    with pytest.raises(SeparationDetected) as info:
        run_analysis(config_for(path, 1, id_column=None))
    assert info.value.stage == "gps-fit"
    assert main(["analyze", "--config", str(write_config(tmp_path, path))]) == 3


def write_config(tmp_path, data_path, **extra):
    doc = {"input": str(data_path), "outcome": "y", "treatment": "level", "covariates": ["x1"], **extra}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def gate_fail_config(tmp_path):
    data = linear_outcome_data(
        1200, [0, 1, 2], np.ones(6) * 0.3, [1.0, 1.0, -1.0, 0.8, -0.8, 0.6], [-1, 1], seed=3
    )
    path = dataset_csv(tmp_path / "g.csv", data)
    return config_for(path, 6, K=[1], adjustment=["A2"])


def test_gate_failure_skips_estimation(tmp_path):
    report = run_analysis(gate_fail_config(tmp_path))
    d = report.to_dict()
    design = d["designs"][0]
    assert not design["gate"]["passed"]
    assert "effects" not in design and "comparators" not in d
    assert "balance gate" in design["skipped"]
    assert report.exit_code == 4
    assert any("K=1" in n for n in report.notes)


def test_audit_mode_reports_balance_only(tmp_path):
    cfg = gate_fail_config(tmp_path).with_mode("audit")
    d = run_analysis(cfg).to_dict()
    assert d["exit_code"] == 0
    assert "balance" in d["designs"][0] and "effects" not in d["designs"][0]


def test_simulation_smoke():
    cfg = from_mapping({
        "mode": "simulate",
        "synthetic": {"n": 400, "seed": 1},
        "simulation": {"sets": ["set1"], "M": 6, "n_covariates": 4, "bootstrap_B": 5,
                       "estimators": ["subclass_regression_K2", "naive", "iptw"]},
    })
    summaries, report = run_simulation(cfg)
    s = summaries["set1"]
    assert s.completed + s.failed == 6
    for e in s.estimators.values():
        assert e.complete <= e.average


# --------------------------------------------------------------------------- #
# command line
# --------------------------------------------------------------------------- #


def test_cli_exit_codes(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["analyze", "--config", str(missing)]) == 2
    cfg = gate_fail_config(tmp_path)
    path = tmp_path / "gate.json"
    doc = cfg.to_dict()
    doc["treatment"] = {"column": doc.pop("treatment_column"), "levels": doc.pop("treatment_levels")}
    path.write_text(json.dumps(doc))
    assert main(["analyze", "--config", str(path), "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "analyze.json").exists()
    assert main(["audit", "--config", str(path), "--format", "markdown"]) == 0
    assert "# Run report (audit)" in capsys.readouterr().out


def test_cli_json_is_reproducible(tmp_path):
    cfg = tmp_path / "sim.yaml"
    cfg.write_text(yaml.safe_dump({
        "synthetic": {"n": 300, "seed": 2},
        "simulation": {"sets": ["set2"], "M": 3, "n_covariates": 4, "bootstrap_B": 4,
                       "estimators": ["subclass_K2", "naive"]},
    }))
    outs = []
    for i, workers in enumerate([1, 1, 2]):
        out = tmp_path / f"run{i}"
        assert main(["simulate", "--config", str(cfg), "--seed", "5", "--out", str(out), "--workers", str(workers)]) == 0
        outs.append((out / "simulate.json").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    assert json.loads(outs[0])["provenance"]["seed"] == 5


def test_load_config_resolves_relative_input(tmp_path):
    (tmp_path / "cfg.yaml").write_text("input: data.csv\noutcome: y\ntreatment: level\ncovariates: [x1]\n")
    assert load_config(tmp_path / "cfg.yaml").input == str(tmp_path / "data.csv")
