import dataclasses
import json
import math

import pytest

from ioncav.experiments import runner
from ioncav.experiments.cli import main
from ioncav.experiments.compare import (SchemaError, compare, orphan_outputs,
                                        verify_manifest)
from ioncav.experiments.config import (EXPERIMENTS, ConfigError, default_document, from_dict,
                                       load_config, parse_angular, parse_time,
                                       parse_time_or_length)
from ioncav.experiments.runner import NumericalError, csv_text, format_number, run
from ioncav.model import mhz
from ioncav.observables import FitError


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


# --------------------------------------------------------------------------
# config

@pytest.mark.parametrize("text, seconds", [("37.7 ns", 37.7e-9), ("150 ns", 1.5e-7),
                                           ("2 us", 2e-6), ("170 us", 170e-6), (4e-6, 4e-6)])
def test_parse_time(text, seconds):
    assert parse_time(text) == seconds


def test_parse_time_rejects_garbage():
    for bad in ("fast", "3 parsecs", True):
        with pytest.raises(ValueError):
            parse_time(bad)


def test_parse_angular():
    assert parse_angular("2pi*25 MHz") == pytest.approx(mhz(25))
    assert parse_angular("1e6 rad/s") == 1e6
    with pytest.raises(ValueError):
        parse_angular("25 MHz")


def test_parse_length():
    assert parse_time_or_length("170 um") == pytest.approx(170e-6)


def test_defaults_load_for_every_experiment(tmp_path):
    for exp in EXPERIMENTS:
        cfg = load_config(experiment=exp, output_dir=tmp_path)
        assert cfg.experiment == exp
        assert cfg.cavity.g_bar == pytest.approx(mhz(1.6))


def test_per_experiment_defaults(tmp_path):
    cfg = load_config(experiment="spin_photon", output_dir=tmp_path)
    assert cfg.preparation.fidelity == 0.9
    assert cfg.detection.background_rate > 0
    assert load_config(experiment="emit_histogram", output_dir=tmp_path).preparation.fidelity == 1.0


def test_user_file_overrides_defaults(tmp_path):
    path = _write(tmp_path / "c.json", {
        "experiment": "g2", "physics": {"cavity": {"kappa": "2pi*20 MHz"}},
        "experiments": {"g2": {"detection": {"background_rate": 10.0}}}})
    cfg = load_config(path, output_dir=tmp_path, base_seed=4)
    assert cfg.cavity.kappa == pytest.approx(mhz(20))
    assert cfg.detection.background_rate == 10.0
    assert cfg.base_seed == 4


def test_keyword_overrides_win(tmp_path):
    path = _write(tmp_path / "c.json", {"experiment": "g2", "n_trajectories": 50})
    cfg = load_config(path, output_dir=tmp_path, n_trajectories=7)
    assert cfg.n_trajectories == 7


def test_comment_keys_ignored(tmp_path):
    cfg = load_config(experiment="g2", output_dir=tmp_path)
    snap = json.dumps(cfg.snapshot())
    assert '"_' not in snap and "experiments" not in cfg.snapshot()


def test_all_errors_listed(tmp_path):
    path = _write(tmp_path / "c.json", {
        "physics": {"cavity": {"kappa": "25 MHz"}, "preparation": {"fidelity": 1.5}},
        "n_trajectories": 0})
    with pytest.raises(ConfigError) as exc:
        load_config(path, experiment="g2", output_dir=tmp_path)
    text = "\n".join(exc.value.errors)
    assert "kappa" in text and "fidelity" in text and "n_trajectories" in text


def test_experiment_mismatch(tmp_path):
    path = _write(tmp_path / "c.json", {"experiment": "g2"})
    with pytest.raises(ConfigError):
        load_config(path, experiment="spin_photon", output_dir=tmp_path)


def test_missing_seed_is_an_error(tmp_path):
    doc = default_document()
    doc.pop("base_seed")
    with pytest.raises(ConfigError) as exc:
        from_dict(doc, experiment="g2", output_dir=tmp_path)
    assert any("base_seed" in e for e in exc.value.errors)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json", experiment="g2")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json", experiment="g2")


# --------------------------------------------------------------------------
# runner

def test_format_number_round_trips():
    for x in (0.1, 1 / 3, 1.5e-7, 2.0):
        assert float(format_number(x)) == x


def test_csv_header_names_manifest():
    text = csv_text(["a", "b"], [(1, 2.5)], "x.manifest.json")
    assert text.splitlines()[0] == "# manifest: x.manifest.json"
    assert text.splitlines()[1] == "a,b"


def _small(exp, tmp_path, n=2000, seed=3, **kw):
    cfg = load_config(experiment=exp, output_dir=tmp_path, n_trajectories=n, base_seed=seed)
    return dataclasses.replace(cfg, **kw) if kw else cfg


@pytest.mark.parametrize("exp, files", [
    ("emit_histogram", {"emit_histogram.csv", "emit_histogram_fit.json"}),
    ("g2", {"g2_coincidences.csv"}),
    ("budget_report", {"budget_report.json"}),
])
def test_runner_outputs(exp, files, tmp_path):
    n = 20000 if exp == "emit_histogram" else 2000
    manifest, paths = run(_small(exp, tmp_path, n=n))
    assert set(paths) == files
    mfile = tmp_path / f"{exp}.manifest.json"
    doc = json.loads(mfile.read_text())
    assert doc["experiment"] == exp and doc["config"]["base_seed"] == 3
    assert set(doc["outputs"]) == files
    assert verify_manifest(mfile) == []
    assert orphan_outputs(tmp_path) == []
    for p in paths.values():
        if p.suffix == ".csv":
            assert p.read_text().startswith(f"# manifest: {mfile.name}")


def test_spin_photon_runner(tmp_path):
    cfg = _small("spin_photon", tmp_path, n=30000)
    manifest, paths = run(cfg)
    s = manifest.summary
    assert {"p_down_given_plus", "p_up_given_minus", "ratio_plus_minus",
            "noise_fraction", "background_rate"} <= set(s)
    assert json.loads(paths["spin_photon.json"].read_text())["manifest"] == \
        "spin_photon.manifest.json"


def test_saturation_runner(tmp_path):
    cfg = load_config(experiment="saturation_curve", output_dir=tmp_path)
    cfg = dataclasses.replace(cfg, protocol=dataclasses.replace(
        cfg.protocol, photon_numbers=(30.0, 55.0, 80.0), probe_duration=20e-6))
    manifest, paths = run(cfg)
    assert set(paths) == {"saturation_curve.csv", "saturation_fit.json"}
    assert manifest.summary["n0"] > 0


def test_same_seed_gives_identical_bytes(tmp_path):
    f = "emit_histogram.csv"
    a = run(_small("emit_histogram", tmp_path / "a", n=5000))[1][f].read_bytes()
    b = run(_small("emit_histogram", tmp_path / "b", n=5000))[1][f].read_bytes()
    c = run(_small("emit_histogram", tmp_path / "c", n=5000, seed=4))[1][f].read_bytes()
    assert a == b and a != c


def test_rerun_replaces_previous_outputs(tmp_path):
    run(_small("g2", tmp_path))
    run(_small("g2", tmp_path, seed=4))
    assert verify_manifest(tmp_path / "g2.manifest.json") == []
    assert orphan_outputs(tmp_path) == []


def test_failure_leaves_nothing_behind(tmp_path, monkeypatch):
    run(_small("g2", tmp_path))

    def broken(cfg, stage, manifest):
        (stage / "g2_coincidences.csv").write_text("partial")
        raise FitError("synthetic failure")

    monkeypatch.setitem(runner.PROTOCOLS, "g2", broken)
    with pytest.raises(NumericalError):
        run(_small("g2", tmp_path))
    # no partial file or staging directory survives; the earlier run stays consistent
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".staging")] == []
    assert (tmp_path / "g2_coincidences.csv").read_text() != "partial"
    assert verify_manifest(tmp_path / "g2.manifest.json") == []
    assert orphan_outputs(tmp_path) == []


def test_failure_in_fresh_directory(tmp_path, monkeypatch):
    def broken(cfg, stage, manifest):
        (stage / "g2_coincidences.csv").write_text("partial")
        raise FitError("synthetic failure")

    monkeypatch.setitem(runner.PROTOCOLS, "g2", broken)
    with pytest.raises(NumericalError):
        run(_small("g2", tmp_path))
    assert list(tmp_path.iterdir()) == []


def test_tampered_output_detected(tmp_path):
    _, paths = run(_small("budget_report", tmp_path))
    paths["budget_report.json"].write_text("{}")
    assert verify_manifest(tmp_path / "budget_report.manifest.json")
    (tmp_path / "stray.csv").write_text("x")
    assert orphan_outputs(tmp_path) == ["stray.csv"]


# --------------------------------------------------------------------------
# compare

def _golden(tmp_path, quantities):
    return _write(tmp_path / "golden.json", {"schema_version": 1, "quantities": quantities})


def _fit_file(tmp_path, tau):
    return _write(tmp_path / "fit.json", {"tau_ns": tau, "nested": {"x": 1.0}})


def test_compare_pass_and_fail(tmp_path):
    golden = _golden(tmp_path, {"tau_ns": {"expected": 35.4, "tolerance": 2.0},
                                "nested.x": {"expected": 1.0, "tolerance": 0.0}})
    assert compare([_fit_file(tmp_path, 35.0)], golden).passed
    report = compare([_fit_file(tmp_path, 40.0)], golden)
    assert not report.passed
    assert [c.name for c in report.failures] == ["tau_ns"]
    assert "FAIL tau_ns" in report.text()


def test_compare_missing_quantity(tmp_path):
    golden = _golden(tmp_path, {"g2_zero": {"expected": 0.0, "tolerance": 1.0}})
    with pytest.raises(SchemaError):
        compare([_fit_file(tmp_path, 35.0)], golden)


def test_compare_non_finite(tmp_path):
    golden = _golden(tmp_path, {"tau_ns": {"expected": 35.4, "tolerance": 2.0}})
    with pytest.raises(SchemaError):
        compare([_write(tmp_path / "r.json", {"tau_ns": math.nan})], golden)


def test_golden_schema_checked(tmp_path):
    with pytest.raises(SchemaError):
        compare([], _write(tmp_path / "g.json", {"schema_version": 2, "quantities": {"a": {}}}))
    with pytest.raises(SchemaError):
        compare([], _write(tmp_path / "g.json", {"quantities": {"a": {"expected": 1}}}))


# --------------------------------------------------------------------------
# CLI

def test_cli_budget(capsys):
    assert main(["budget"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["measured"]["mirror_outcoupling"] == pytest.approx(0.3226, abs=1e-4)


def test_cli_run_and_golden(tmp_path, capsys):
    golden = _golden(tmp_path, {"zero_delay": {"expected": 0, "tolerance": 0.5}})
    code = main(["g2", "--out", str(tmp_path / "out"), "--seed", "2",
                 "--trajectories", "2000", "--golden", str(golden)])
    assert code == 0
    assert "PASS zero_delay" in capsys.readouterr().out


def test_cli_comparison_failure(tmp_path):
    golden = _golden(tmp_path, {"tau_ns": {"expected": 35.4, "tolerance": 2.0}})
    assert main(["compare", str(_fit_file(tmp_path, 40.0)), "--golden", str(golden)]) == 3
    assert main(["compare", str(_fit_file(tmp_path, 35.0)), "--golden", str(golden)]) == 0


def test_cli_invalid_config(tmp_path, capsys):
    assert main(["g2", "--out", str(tmp_path), "--trajectories", "0"]) == 1
    assert "n_trajectories" in capsys.readouterr().err


def test_cli_missing_quantity_is_invalid_input(tmp_path):
    golden = _golden(tmp_path, {"g2_zero": {"expected": 0.0, "tolerance": 1.0}})
    assert main(["compare", str(_fit_file(tmp_path, 35.0)), "--golden", str(golden)]) == 1


def test_cli_numerical_failure(tmp_path, monkeypatch, capsys):
    def broken(cfg, stage, manifest):
        raise FitError("no decay")

    monkeypatch.setitem(runner.PROTOCOLS, "emit_histogram", broken)
    assert main(["emit_histogram", "--out", str(tmp_path), "--trajectories", "10"]) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_cli_inconsistent_budget(tmp_path, capsys):
    path = _write(tmp_path / "c.json", {"budget": {"eta_total_exp": 0.5}})
    assert main(["budget", "--config", str(path)]) == 2
