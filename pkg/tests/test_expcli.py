import json

import jsonschema
import pytest
from click.testing import CliRunner

from enhperc import expcli
from enhperc.expcli import ExperimentKind, ExperimentSpec, Gate, ResultRecord


def small_sandwich(**kw):
    base = dict(kind=ExperimentKind.SANDWICH, p=[0.5], L=10, n_samples=4, seed=3)
    base.update(kw)
    return ExperimentSpec(**base)


def test_spec_round_trip_and_digest():
    spec = ExperimentSpec(ExperimentKind.CARDY, rho=[0.5, 2], mesh=[1 / 16], options={"tolerance": 0.1})
    back = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert back == spec and back.digest() == spec.digest()
    # the output location does not change what is computed
    assert ExperimentSpec(ExperimentKind.CARDY, rho=[0.5, 2], mesh=[1 / 16], options={"tolerance": 0.1},
                          out="x").digest() == spec.digest()
    assert ExperimentSpec(ExperimentKind.CARDY, seed=1).digest() != ExperimentSpec(ExperimentKind.CARDY).digest()
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"kind": "CrossingVsCardy", "colour": "red"})
    with pytest.raises(ValueError):
        ExperimentSpec(kind="NoSuchExperiment")


def test_gates():
    for op, ok in (("<=", 1), (">=", 1), ("<", 0), (">", 0), ("==", 1)):
        assert Gate("g", 2.0, op, 2.0).passed is bool(ok)


def test_runs_are_deterministic():
    a = expcli.run(small_sandwich())
    b = expcli.run(small_sandwich())
    assert a.same_results(b)
    assert expcli.rows_to_csv(a.rows) == expcli.rows_to_csv(b.rows)
    assert a.passed
    c = expcli.run(small_sandwich(seed=4))
    assert not a.same_results(c)


def test_report_files_are_reproducible(tmp_path):
    rec = expcli.run(small_sandwich())
    expcli.report(rec, tmp_path / "a", "csv")
    expcli.report(expcli.run(small_sandwich()), tmp_path / "b", "csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == ",".join(expcli.CSV_COLUMNS)
    loaded = expcli.load_record(tmp_path / "a.json")
    assert loaded.same_results(rec) and loaded.recheck()
    with pytest.raises(ValueError):
        expcli.report(rec, tmp_path / "c", "xml")


def test_empty_rows_give_a_header_only_csv():
    assert expcli.rows_to_csv([]) == ",".join(expcli.CSV_COLUMNS) + "\n"


def test_record_schema_rejects_malformed_records():
    rec = expcli.run(small_sandwich()).to_dict()
    expcli.validate_record(rec)
    broken = json.loads(json.dumps(rec))
    broken["rows"][0]["extra"] = 1
    with pytest.raises(jsonschema.ValidationError):
        expcli.validate_record(broken)
    broken = json.loads(json.dumps(rec))
    del broken["spec_hash"]
    with pytest.raises(jsonschema.ValidationError):
        expcli.validate_record(broken)


def test_recheck_catches_tampered_gates():
    rec = expcli.run(small_sandwich())
    d = rec.to_dict()
    d["gates"][0]["value"] = 5.0
    assert not ResultRecord.from_dict(d).recheck()


def test_nonfinite_estimates_are_stored_as_text():
    spec = small_sandwich()
    row = expcli._row("x", spec, estimate=float("inf"), se=float("nan"))
    assert row["estimate"] == "inf" and row["SE"] == "nan"
    expcli.validate_record({**expcli.run(spec).to_dict(), "rows": [row]})


def test_cardy_record_and_duality_gate():
    spec = ExperimentSpec(ExperimentKind.CARDY, L=16, rho=[1.0, 2.0], n_samples=50, seed=1)
    rec = expcli.run(spec)
    names = [g["name"] for g in rec.gates]
    assert any(n.startswith("F(rho) + F(1/rho)") for n in names)
    assert {r["quantity"] for r in rec.rows} == {"phi", "cardy_F"}


def test_shift_record_labels_its_rows():
    spec = ExperimentSpec(ExperimentKind.SHIFT, p=[0.45], L=16, n_samples=40, seed=2,
                          options={"shift_grid": [0.46, 0.5]})
    rec = expcli.run(spec)
    q = [r["quantity"] for r in rec.rows]
    assert "uplift" in q and "sign test p-value" in q and "empirical lower bound on shift" in q


def test_rule_on_wrong_lattice_is_rejected():
    with pytest.raises(ValueError):
        expcli.run(ExperimentSpec(ExperimentKind.SANDWICH, lattice="square", rule="tri-m3", L=8, n_samples=1))
    with pytest.raises(KeyError):
        expcli.run(ExperimentSpec(ExperimentKind.SANDWICH, rule="tri-m42", L=8, n_samples=1))


def test_cli_exit_codes(tmp_path):
    runner = CliRunner()
    ok = runner.invoke(expcli.main, ["simulate", "--size", "10", "--samples", "3", "--seed", "5",
                                     "--out", str(tmp_path / "sim")])
    assert ok.exit_code == 0, ok.output
    assert "overall: PASS" in ok.output
    assert (tmp_path / "sim.csv").exists() and (tmp_path / "sim.json").exists()
    again = runner.invoke(expcli.main, ["report", str(tmp_path / "sim.json")])
    assert again.exit_code == 0 and again.output == ok.output
    cfg = tmp_path / "c.yaml"
    cfg.write_text("L: 16\nn_samples: 20\nrho: [1.0]\noptions:\n  tolerance: -1.0\n")
    bad = runner.invoke(expcli.main, ["crossing", "--config", str(cfg)])
    assert bad.exit_code == 1 and "overall: FAIL" in bad.output


def test_cli_fractions_and_environment_seed(tmp_path):
    runner = CliRunner()
    res = runner.invoke(expcli.main, ["crossing", "--mesh", "1/16", "--samples", "10", "--format", "json",
                                      "--out", str(tmp_path / "r")], env={"ENHPERC_SEED": "17"})
    assert res.exit_code in (0, 1), res.output
    rec = expcli.load_record(tmp_path / "r.json")
    assert rec.spec["seed"] == 17 and rec.spec["mesh"] == [0.0625]
    assert not (tmp_path / "r.csv").exists()


def test_cli_rejects_unknown_rule():
    res = CliRunner().invoke(expcli.main, ["simulate", "--rule", "nope", "--size", "8", "--samples", "1"])
    assert res.exit_code != 0


def test_essential_check_on_a_subset():
    spec = ExperimentSpec(ExperimentKind.ESSENTIALITY, options={"rules": ["tri-m2", "sq-NEW-star"]})
    rec = expcli.run(spec)
    assert rec.passed
    got = {r["rule"]: r["estimate"] for r in rec.rows}
    assert got == {"tri-m2": 1.0, "sq-NEW-star": 0.0}
