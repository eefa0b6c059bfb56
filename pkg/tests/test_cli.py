import json
import subprocess
import sys

import jsonschema
import pytest

from subelliptic_lab import cli

H1 = {"kind": "Heisenberg", "k": 1}


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run(tmp_path, command, doc, out="out", *extra):
    cfg = write(tmp_path, doc)
    return cli.main(["run", command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])


def reports(path):
    # everything except the manifest, which records wall time and thread count
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "manifest.json"}


# -- config errors ----------------------------------------------------------------------

def test_q_out_of_range(tmp_path, capsys):
    assert run(tmp_path, "verify:ubound", {"space": H1, "p": 4.0, "q": 3}) == 2
    assert "q: 3 is greater than the maximum of 2" in capsys.readouterr().err


def test_unknown_key(tmp_path, capsys):
    assert run(tmp_path, "sample", {"space": H1, "p": 2.0, "colour": 1}) == 2
    assert "colour" in capsys.readouterr().err


def test_bad_space(tmp_path, capsys):
    assert run(tmp_path, "sample", {"space": {"kind": "Grushin", "n": 1, "m": 1, "eta": -1}, "p": 2.0}) == 2


def test_spi_scan_needs_p_above_threshold(tmp_path, capsys):
    assert run(tmp_path, "spi-scan", {"space": H1, "p": 2.0}) == 2
    assert "p > alpha + 1" in capsys.readouterr().err


def test_cheeger_only_at_endpoint(tmp_path):
    assert run(tmp_path, "cheeger", {"space": H1, "p": 4.0}) == 2


def test_unknown_command(tmp_path, capsys):
    assert run(tmp_path, "verify:poincare", {"space": H1, "p": 2.0}) == 2
    assert "unknown command" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["run", "sample", "--config", str(tmp_path / "nope.json")]) == 2


def test_defaults_filled():
    cfg = cli.validate_config({"space": H1, "p": 4.0, "budgets": {"n_samples": 5}}, "sample")
    assert cfg["q"] == 1.0 and cfg["budgets"]["n_samples"] == 5
    assert cfg["budgets"]["z_budget"] == cli.DEFAULTS["budgets"]["z_budget"]


def test_schema_command(capsys):
    assert cli.main(["schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    jsonschema.Draft202012Validator.check_schema(schema)
    assert schema["required"] == ["space", "p"]


# -- commands ---------------------------------------------------------------------------

def test_check_estimates(tmp_path):
    doc = {"space": H1, "p": 2.0, "budgets": {"cloud_size": 2000},
           "estimates": {"mode": "fd", "exact_gradient_tol": 1e-5}}
    assert run(tmp_path, "check-estimates", doc) == 0
    out = tmp_path / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["reports"] == ["estimates.csv", "estimates.json"] and manifest["failures"] == []
    est = json.loads((out / "estimates.json").read_text())
    assert est["manifest_hash"] == manifest["manifest_hash"]
    assert est["exponents"]["Q"] == 4.0


def test_reruns_byte_identical(tmp_path):
    doc = {"space": H1, "p": 2.0, "seed": 4, "budgets": {"cloud_size": 500}}
    assert run(tmp_path, "check-estimates", doc, "a") == 0
    assert run(tmp_path, "check-estimates", doc, "b") == 0
    assert reports(tmp_path / "a") == reports(tmp_path / "b")


def test_seed_flag_changes_hash(tmp_path):
    doc = {"space": H1, "p": 2.0, "budgets": {"cloud_size": 200}}
    run(tmp_path, "check-estimates", doc, "a", "--seed", "1")
    run(tmp_path, "check-estimates", doc, "b", "--seed", "2")
    ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["manifest_hash"]
    hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["manifest_hash"]
    assert ha != hb


def test_thread_count_invariance(tmp_path):
    doc = {"space": {"kind": "Grushin", "n": 1, "m": 1, "eta": 1.0}, "p": 2.0, "seed": 2,
           "budgets": {"n_samples": 5000, "n_region": 4096}, "verify": {"family": "tubes"}}
    assert run(tmp_path, "verify:ckn", doc, "t1", "--threads", "1") == 0
    assert run(tmp_path, "verify:ckn", doc, "t4", "--threads", "4") == 0
    assert reports(tmp_path / "t1") == reports(tmp_path / "t4")


def test_sample_then_reuse(tmp_path):
    doc = {"space": H1, "p": 2.0, "seed": 3, "budgets": {"n_samples": 20000}}
    assert run(tmp_path, "sample", doc) == 0
    slab = tmp_path / "out" / "samples.slab"
    assert slab.exists()
    summary = json.loads((tmp_path / "out" / "sample.json").read_text())
    m = summary["mean_N_p"]
    assert abs(m["value"] - m["exact"]) < 4 * m["stderr"]
    # a matching file is accepted, a file for another measure is not
    assert run(tmp_path, "isoperimetry", {**doc, "samples_file": str(slab)}, "iso") == 0
    assert (tmp_path / "iso" / "isoperimetry.csv").exists()
    assert run(tmp_path, "isoperimetry", {"space": H1, "p": 3.0, "samples_file": str(slab)}, "bad") == 2


def test_spi_scan(tmp_path):
    assert run(tmp_path, "spi-scan", {"space": H1, "p": 4.0, "q": 2.0}) == 0
    fit = json.loads((tmp_path / "out" / "spi_scan.json").read_text())["fit"]
    assert fit["fitted_sigma"] == pytest.approx(fit["target_sigma"], abs=1e-9)


def test_report_collects(tmp_path):
    doc = {"space": H1, "p": 4.0, "q": 2.0}
    run(tmp_path, "spi-scan", doc)
    assert run(tmp_path, "report", doc) == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert [r["file"] for r in rep["reports"]] == ["spi_scan.json"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "subelliptic_lab", "schema"], capture_output=True, text=True)
    assert res.returncode == 0 and '"space"' in res.stdout
