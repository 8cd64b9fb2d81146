import csv
import io
import json
import subprocess
import sys
import time

import pytest

from swssre import cli
from swssre.manifest import (
    ManifestError,
    bundled_config_names,
    dump_manifest,
    load_manifest,
    parse_manifest,
    write_manifest,
)
from swssre.report import COLUMNS, FIGURE_COLUMNS, PROGRESS_FILE, RESULTS_FILE, emit_figure_data, fmt, run_manifest

SMALL = """\
schema: 1
name: small
replicates: 40
seed: 7
scenario:
  tds: TDS2
  design: tds2
  truth: {sigma_c_sq: 0.1111111111111111, sigma_e_sq: 1.0}
  test: {alpha: 0.05, beta: 0.2, delta: 0.24}
  t: 5
  n_init: derive
  n_min: {fraction: 0.5}
  n_max: 20
sweep:
  assumed_multiplier: [[0.5, 0.5], [1.0, 1.0]]
  method: [blinded, fixed]
"""


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


# ----------------------------------------------------------------------------
# manifests


def test_bundled_configs_listed():
    names = bundled_config_names()
    assert {"tds1.config", "tds2.config", "tds1_timing.config", "tds2_period_effects.config"} <= set(names)


@pytest.mark.parametrize("name", ["tds1", "tds2"])
def test_bundled_grid_has_54_scenarios(name):
    m = load_manifest(name)
    assert len(m.scenarios) == 9 * 2 * 3 == 54
    methods = {s.spec.method for s in m.scenarios}
    assert methods == {"blinded", "unblinded", "fixed"}


def test_tds1_derives_n_init():
    m = load_manifest("tds1")
    truth = [s for s in m.scenarios if s.meta["variance_scenario"] == "1x,1x"]
    assert {s.spec.n_init for s in truth} == {70}
    half = [s for s in m.scenarios if s.meta["variance_scenario"] == "0.5x,0.5x"]
    assert {s.spec.n_init for s in half} == {34}


def test_all_bundled_configs_parse():
    for name in bundled_config_names():
        m = load_manifest(name)
        assert m.scenarios and all(s.spec.is_resolved for s in m.scenarios)


def test_sweep_order_first_key_outermost():
    m = parse_manifest(SMALL)
    got = [(s.meta["variance_scenario"], s.spec.method) for s in m.scenarios]
    assert got == [("0.5x,0.5x", "blinded"), ("0.5x,0.5x", "fixed"), ("1x,1x", "blinded"), ("1x,1x", "fixed")]
    assert [s.index for s in m.scenarios] == [0, 1, 2, 3]


def test_manifest_round_trip(tmp_path):
    m = parse_manifest(SMALL)
    path = tmp_path / "m.yaml"
    write_manifest(m, path)
    again = load_manifest(path)
    assert again == m
    assert [s.spec for s in again.scenarios] == [s.spec for s in m.scenarios]
    assert dump_manifest(again) == dump_manifest(m)


@pytest.mark.parametrize(
    "edit, fragment",
    [
        (("  n_max: 20", "  n_max: 1"), "n_min"),
        (("  t: 5", "  tt: 5"), "scenario.tt: unknown key"),
        (("replicates: 40", "replicates: 0"), "replicates"),
        (("  n_init: derive", "  n_init: 2.5"), "n_init"),
        (("  method: [blinded, fixed]", "  method: [blinded, sequential]"), "sweep.method"),
        (("  t: 5", "  t: 9"), "interim period"),
        (("schema: 1", "schema: 2"), "unsupported schema"),
        (("  n_max: 20", "  n_max: 20\n  within_divisor: n"), "scenario.within_divisor"),
        (("  design: tds2", "  design: tds9"), "design"),
    ],
)
def test_manifest_errors_name_the_field(edit, fragment):
    text = SMALL.replace(*edit)
    with pytest.raises(ManifestError) as info:
        parse_manifest(text, "bad.yaml")
    msg = str(info.value)
    assert fragment in msg and msg.startswith("bad.yaml")


def test_manifest_error_reports_line():
    with pytest.raises(ManifestError, match=r"bad.yaml:10: scenario.tt"):
        parse_manifest(SMALL.replace("  t: 5", "  tt: 5"), "bad.yaml")


def test_manifest_parse_error():
    with pytest.raises(ManifestError, match="parse error"):
        parse_manifest("scenario: [1, 2", "x.yaml")
    with pytest.raises(ManifestError, match="empty manifest"):
        parse_manifest("", "x.yaml")
    with pytest.raises(ManifestError, match="no such file"):
        load_manifest("does-not-exist")


def test_manifest_explicit_design_and_values():
    text = SMALL.replace("  design: tds2", "  design: {C: 4, T: 5, switches: [0, 1, 1, 1, 1]}")
    text = text.replace("  t: 5", "  t: 3\n  tau: delta\n  pi: [0.1, 0.0, 0.0, 0.0]\n  n_init: 12").replace("  n_init: derive\n", "")
    m = parse_manifest(text)
    sc = m.scenarios[0].spec
    assert sc.X.C == 4 and sc.tau == 0.24 and sc.n_init == 12 and sc.n_min == 6
    assert m.scenarios[0].meta["rate"] == "EP"


# ----------------------------------------------------------------------------
# report


def test_fmt():
    assert fmt(float("nan")) == "" and fmt(True) == "1" and fmt(0.123456789) == "0.123457" and fmt(7) == "7"


def test_run_manifest_writes_table(tmp_path):
    m = parse_manifest(SMALL)
    table = run_manifest(m, tmp_path)
    text = (tmp_path / RESULTS_FILE).read_text()
    rows = _rows(text)
    assert list(rows[0]) == list(COLUMNS) and len(rows) == 4
    assert rows[1]["method"] == "fixed" and rows[1]["t"] == ""
    assert rows[0]["n_init"] == "4" and rows[2]["n_init"] == "7"
    assert all(r["status"] == "ok" for r in rows) and not table.errors
    assert "wall" not in text


def test_empty_manifest_gives_header_only(tmp_path):
    m = parse_manifest(SMALL.replace("  method: [blinded, fixed]", "  method: []"))
    assert m.scenarios == []
    run_manifest(m, tmp_path)
    assert (tmp_path / RESULTS_FILE).read_text() == ",".join(COLUMNS) + "\n"


def test_resume_reproduces_uninterrupted_run(tmp_path):
    m = parse_manifest(SMALL)
    full = tmp_path / "full"
    run_manifest(m, full)
    part = tmp_path / "part"
    run_manifest(m, part)
    lines = (part / PROGRESS_FILE).read_text().splitlines(keepends=True)
    # keep two finished scenarios and half of a third, as after a crash
    (part / PROGRESS_FILE).write_text("".join(lines[:2]) + lines[2][: len(lines[2]) // 2])
    (part / RESULTS_FILE).unlink()
    seen = []
    run_manifest(m, part, resume=True, on_row=seen.append)
    assert len(seen) == 2
    assert (part / RESULTS_FILE).read_bytes() == (full / RESULTS_FILE).read_bytes()


def test_resume_ignores_progress_for_other_settings(tmp_path):
    m = parse_manifest(SMALL)
    run_manifest(m, tmp_path)
    seen = []
    run_manifest(m, tmp_path, replicates=30, resume=True, on_row=seen.append)
    assert len(seen) == 4


def test_error_rows_do_not_stop_the_batch(tmp_path, monkeypatch):
    import swssre.report as report

    real = report.estimate_err

    def flaky(spec, r, seed, workers):
        if spec.method == "fixed":
            raise RuntimeError("boom")
        return real(spec, r, seed, workers)

    monkeypatch.setattr(report, "estimate_err", flaky)
    table = run_manifest(parse_manifest(SMALL), tmp_path)
    assert [r["status"] for r in table.rows] == ["ok", "error", "ok", "error"]
    assert table.errors[0]["message"] == "RuntimeError: boom"


def test_figure_data(tmp_path):
    text = SMALL.replace("  method: [blinded, fixed]", "  method: [blinded, unblinded]\n  sigma_pi_sq: [0.0, 0.1]")
    fig = emit_figure_data(parse_manifest(text), tmp_path)
    rows = _rows((tmp_path / "figure_data.csv").read_text())
    assert list(rows[0]) == FIGURE_COLUMNS and len(rows) == len(fig.rows) == 8
    assert {r["sigma_pi_sq"] for r in rows} == {"0", "0.1"}


def test_figure_data_single_point(tmp_path):
    text = SMALL.replace("sweep:\n  assumed_multiplier: [[0.5, 0.5], [1.0, 1.0]]\n  method: [blinded, fixed]\n", "").replace(
        "  n_max: 20", "  n_max: 20\n  method: blinded"
    )
    fig = emit_figure_data(parse_manifest(text), tmp_path)
    assert len(fig.rows) == 1


def test_figure_requires_zero_effect(tmp_path):
    text = SMALL.replace("  t: 5", "  t: 5\n  tau: delta")
    with pytest.raises(ValueError, match="tau = 0"):
        emit_figure_data(parse_manifest(text), tmp_path)


# ----------------------------------------------------------------------------
# command line


def test_cli_power_tds1(capsys):
    assert cli.main(["power", "--design", "tds1", "--sigma-c-sq", "0.02", "--sigma-e-sq", "0.51", "--delta", "0.2"]) == 0
    assert capsys.readouterr().out.strip() == "70"


def test_cli_power_explicit_design_and_power(capsys):
    args = ["power", "--clusters", "20", "--periods", "9", "--switches", "0,3,3,3,3,2,2,2,2"]
    args += ["--sigma-c-sq", "0.1111111111111111", "--sigma-e-sq", "1", "--beta", "0.2", "--delta", "0.24"]
    assert cli.main(args + ["--verbose"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "7" and out[-1].startswith("power(n)=")
    assert cli.main(args + ["--n", "7"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.80998, abs=1e-5)


def test_cli_power_from_config(capsys):
    assert cli.main(["power", "--config", "tds1"]) == 0
    assert capsys.readouterr().out.strip() == "34"  # first scenario assumes half the variances


def test_cli_power_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["power", "--design", "tds1"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["power"])
    assert info.value.code == 2
    assert cli.main(["power", "--design", "tds1", "--sigma-c-sq", "0.02", "--sigma-e-sq", "-1", "--delta", "0.2"]) == 3


def test_cli_simulate_and_resume(tmp_path, capsys):
    cfg = tmp_path / "small.yaml"
    cfg.write_text(SMALL)
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(out), "--replicates", "20", "--quiet"]) == 0
    first = (out / RESULTS_FILE).read_bytes()
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(out), "--replicates", "20", "--resume"]) == 0
    err = capsys.readouterr().err
    assert (out / RESULTS_FILE).read_bytes() == first
    assert err.count("[") == 0  # everything came from the progress file
    assert json.loads((out / PROGRESS_FILE).read_text().splitlines()[0])["index"] == 0


def test_cli_config_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(SMALL.replace("  t: 5", "  tt: 5"))
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert "bad.yaml:10: scenario.tt" in capsys.readouterr().err


def test_cli_configs(capsys):
    assert cli.main(["configs"]) == 0
    assert "tds1.config" in capsys.readouterr().out.split()


def test_cli_entry_point_runs_fast():
    start = time.perf_counter()
    res = subprocess.run(
        [sys.executable, "-m", "swssre.cli", "power", "--design", "tds1", "--sigma-c-sq", "0.02", "--sigma-e-sq", "0.51", "--delta", "0.2"],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0 and res.stdout.strip() == "70"
    assert time.perf_counter() - start < 10  # interpreter start-up included
