import json

import numpy as np
import pytest

from lambda_idc import cli

SMALL = """\
alpha_sq = 2
chi_over_lambda = 5
kappa_values = 0.3, 0.1   # unsorted on purpose
total_steps = 3500
burn_in_steps = 500
"""


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_error_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path, "alpha_sq 25\n")
    assert cli.main(["sweep", "--config", str(cfg)]) == 2
    assert cli.main(["sweep", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert cli.main(["sweep", "--config", str(_write(tmp_path, "a = 1\na = 2\n", "dup.cfg"))]) == 2


def test_missing_kappa_values_names_field(tmp_path, capsys):
    cfg = _write(tmp_path, "alpha_sq = 25\n")
    assert cli.main(["sweep", "--config", str(cfg)]) == 3
    assert "kappa_values" in capsys.readouterr().err


@pytest.mark.parametrize(
    "line,key",
    [
        ("kappa_values = 1.5", "kappa_values"),
        ("kappa_values = 0.1, 0.1", "kappa_values"),
        ("kappa_values = 0.1\nalpha_sq = -1", "alpha_sq"),
        ("kappa_values = 0.1\ntotal_steps = 100\nburn_in_steps = 100", "total_steps"),
        ("kappa_values = 0.1\ntarget_link_density = 0.2", "target_link_density"),
        ("kappa_values = 0.1\nepsilon_rule = median", "epsilon_rule"),
        ("kappa_values = 0.1\nn_cells = many", "n_cells"),
        ("kappa_values = 0.1\nnetwork = perhaps", "network"),
        ("kappa_values = 0.1\ncolour = blue", "colour"),
    ],
)
def test_validation_errors_exit_3(tmp_path, capsys, line, key):
    cfg = _write(tmp_path, line + "\n")
    assert cli.main(["sweep", "--config", str(cfg)]) == 3
    assert key in capsys.readouterr().err


def test_minimal_config_fills_defaults(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "from_env"))
    cfg = cli.validate_config(_write(tmp_path, "kappa_values = 0.0033\n"))
    assert cfg.alpha_sq == 25 and cfg.chi_over_lambda == 5
    assert cfg.total_steps == 35000 and cfg.burn_in_steps == 10000
    assert cfg.target_link_density == 0.02 and cfg.n_cells == 50
    assert cfg.output_dir == str(tmp_path / "from_env")


def test_flags_override_file(tmp_path):
    cfg = cli.validate_config(_write(tmp_path, SMALL), {"alpha_sq": "3", "network": "off"})
    assert cfg.alpha_sq == 3.0 and cfg.network is False
    assert cfg.kappa_values == [0.1, 0.3]


@pytest.fixture(scope="module")
def small_sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    cfg = _write(root, SMALL)
    code = cli.main(["sweep", "--config", str(cfg), "--output-dir", str(root / "a")])
    return root, cfg, code


def test_sweep_outputs(small_sweep):
    root, _, code = small_sweep
    out = root / "a"
    assert code == 0
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0].split(",") == list(cli.SUMMARY_COLUMNS)
    kappas = [float(r.split(",")[0]) for r in summary[1:]]
    assert kappas == [0.1, 0.3]
    for name in ("series.csv", "return_map.csv", "recurrence_pairs.csv", "return_histogram.csv",
                 "spectrum.csv", "divergence.csv", "degree_histogram.csv"):
        assert (out / "kappa_0.1" / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["kappa"]["0.1"]["status"] == "ok"
    assert manifest["kappa"]["0.1"]["lyapunov"]["fit_range"] == [1, 30]
    assert "n_max" in manifest["decisions"]["fock_cutoffs"]
    assert set(manifest["defaults"]) == set(manifest["config"])


def test_summary_row_matches_data_files(small_sweep):
    root, _, _ = small_sweep
    out = root / "a"
    header, *rows = (out / "summary.csv").read_text().splitlines()
    row = dict(zip(header.split(","), rows[0].split(",")))
    tau, n1 = cli.read_series_csv(out / "kappa_0.1" / "series.csv")
    assert tau[0] == 0 and tau[-1] == 3500
    div = np.loadtxt(out / "kappa_0.1" / "divergence.csv", delimiter=",", skiprows=1)
    slope = np.polyfit(div[1:31, 0], div[1:31, 1], 1)[0]
    assert float(row["lambda_max"]) == pytest.approx(slope, rel=1e-9)
    # collapse needs tau up to 9000, which this short run does not cover
    assert row["collapse_ratio"] == "nan"


def test_rerun_is_bit_identical(small_sweep, tmp_path):
    root, cfg, _ = small_sweep
    assert cli.main(["sweep", "--config", str(cfg), "--output-dir", str(tmp_path / "b"), "--jobs", "2"]) == 0
    for rel in ("summary.csv", "kappa_0.1/series.csv", "kappa_0.3/recurrence_pairs.csv",
                "kappa_0.3/return_histogram_cells.csv", "kappa_0.1/spectrum.csv"):
        assert (root / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_analyze_existing_series(small_sweep, tmp_path):
    root, _, _ = small_sweep
    series = root / "a" / "kappa_0.1" / "series.csv"
    code = cli.main(["analyze", str(series), "--kappa-values", "0.1", "--burn-in-steps", "500",
                     "--total-steps", "3500", "--alpha-sq", "2", "--output-dir", str(tmp_path)])
    assert code == 0
    again = (tmp_path / "summary.csv").read_text().splitlines()[1]
    first = (root / "a" / "summary.csv").read_text().splitlines()[1]
    assert again == first


def test_all_kappa_failures_exit_4(tmp_path):
    cfg = _write(tmp_path, "alpha_sq = 2\nkappa_values = 0.1\ntotal_steps = 600\nburn_in_steps = 500\n")
    assert cli.main(["sweep", "--config", str(cfg), "--output-dir", str(tmp_path / "o")]) == 4
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["kappa"]["0.1"]["status"] == "failed"
    assert "error" in manifest["kappa"]["0.1"]


def test_simulate_only_writes_series(tmp_path):
    cfg = _write(tmp_path, "alpha_sq = 2\nkappa_values = 0.2\ntotal_steps = 50\nburn_in_steps = 10\n")
    assert cli.main(["simulate", "--config", str(cfg), "--output-dir", str(tmp_path / "s")]) == 0
    files = {p.name for p in (tmp_path / "s" / "kappa_0.2").iterdir()}
    assert files == {"series.csv"}
    tau, n1 = cli.read_series_csv(tmp_path / "s" / "kappa_0.2" / "series.csv")
    # the truncated Poisson tail (< 1e-12 in probability) weighs in at n ~ 18 in the mean
    assert n1[0] == pytest.approx(2.0, abs=1e-10)


def test_verify_passes(capsys):
    assert cli.main(["verify", "--samples", "200"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 5
