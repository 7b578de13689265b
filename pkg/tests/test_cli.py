import dataclasses
import io
import warnings

import numpy as np
import pytest

from switchmc.cli import (
    COMPLEXITY_HEADER,
    ConfigError,
    CsvRow,
    RunConfig,
    complexity_study,
    config_from_row,
    convergence_study,
    euler_compare,
    fit_slope,
    format_config,
    main,
    parse_config,
    poly_switch_count,
    read_config_file,
    read_rows,
    run,
    write_rows,
)
from switchmc.estimators import EulerCalibrationConfig
from switchmc.model import CaseSpec, Payoff, constant_model
from switchmc.switching import FiniteVarianceWarning, count_switches, exponential
from switchmc.numerics import RngStream

MINIMAL = dict(case="2", method="antithetic", law="gamma", kappa="0.5", theta="2.5",
               npart="10000")


# -- configuration -------------------------------------------------------------

def test_minimal_flags_give_valid_config():
    cfg = parse_config(overrides=MINIMAL)
    assert (cfg.case_id, cfg.method, cfg.law, cfg.kappa, cfg.theta, cfg.n_part) == \
        (2, "antithetic", "gamma", 0.5, 2.5, 10000)


def test_kappa_above_half_is_accepted_with_warning():
    with pytest.warns(FiniteVarianceWarning):
        cfg = parse_config(overrides={**MINIMAL, "kappa": "0.6"})
    assert cfg.kappa == 0.6


def test_missing_method_names_the_key():
    with pytest.raises(ConfigError, match="'method'"):
        parse_config(overrides={"case": 2})
    with pytest.raises(ConfigError, match="'case_id'"):
        parse_config(overrides={"method": "plain"})


@pytest.mark.parametrize("key,value,pattern", [
    ("kappa", "-0.1", "kappa"), ("theta", "0", "theta"), ("npart", "0", "n_part"),
    ("reps", "0", "reps"), ("method", "magic", "method"), ("case", "9", "case_id"),
    ("npart", "ten", "n_part"), ("law", "weibull", "law"),
])
def test_range_and_type_errors(key, value, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(overrides={**MINIMAL, key: value})


def test_method_specific_requirements():
    with pytest.raises(ConfigError, match="'h' or 'eps'"):
        parse_config(overrides={"case": 2, "method": "euler"})
    assert parse_config(overrides={"case": 2, "method": "euler", "h": "0.01"}).h == 0.01
    with pytest.raises(ConfigError, match="per worker"):
        parse_config(overrides={**MINIMAL, "method": "resample", "npart": 3, "workers": 4})
    with pytest.raises(ConfigError, match="rho"):
        parse_config(overrides={**MINIMAL, "method": "resample", "rho": "0.9"})
    cfg = parse_config(overrides={**MINIMAL, "method": "resample", "kappa": "0.3"})
    assert cfg.potential_params().rho == pytest.approx(0.7)


def test_counts_accept_scientific_notation_and_large_seeds():
    cfg = parse_config(overrides={**MINIMAL, "npart": "1e4", "seed": str(2 ** 63 + 1)})
    assert cfg.n_part == 10000 and cfg.seed == 2 ** 63 + 1
    with pytest.raises(ConfigError):
        parse_config(overrides={**MINIMAL, "npart": "1.5"})


def test_config_file_and_flag_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# experiment\ncase_id = 3\nmethod = plain  # inline comment\n"
                    "lambda = 0.7\nn_part = 500\n\n")
    cfg = parse_config(str(path), {"n-part": "800", "seed": None})
    assert (cfg.case_id, cfg.method, cfg.lam, cfg.n_part) == (3, "plain", 0.7, 800)
    assert read_config_file(str(path))["lam"] == 0.7


def test_config_file_errors_carry_line_context(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("case_id = 2\nmethod antithetic\n")
    with pytest.raises(ConfigError, match=r"bad\.cfg:2"):
        parse_config(str(path))
    path.write_text("case_id = 2\ncolour = red\n")
    with pytest.raises(ConfigError, match=r":2: unknown key 'colour'"):
        parse_config(str(path))
    path.write_text("kappa = abc\n")
    with pytest.raises(ConfigError, match=r":1: key 'kappa'"):
        parse_config(str(path))
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(str(tmp_path / "missing.cfg"))


def test_format_config_round_trip(tmp_path):
    cfg = parse_config(overrides={**MINIMAL, "method": "resample", "rho": "0.5", "seed": 7,
                                  "n_iter": 6, "theta": "0.1"})
    path = tmp_path / "c.cfg"
    path.write_text(format_config(cfg))
    assert parse_config(str(path)) == cfg


# -- CSV -----------------------------------------------------------------------

def test_csv_header_is_exact():
    assert CsvRow.header() == ["case", "method", "law", "kappa", "theta", "rho", "n_part",
                               "reps", "mean", "stderr", "avg_switches", "wall_time_s", "seed"]
    buf = io.StringIO()
    write_rows([], stream=buf)
    assert buf.getvalue() == ",".join(CsvRow.header()) + "\n"


def test_append_safe_output(tmp_path):
    out = tmp_path / "runs.csv"
    cfg = parse_config(overrides={**MINIMAL, "npart": 2000, "output": str(out)})
    run(cfg)
    run(dataclasses.replace(cfg, seed=1))
    text = out.read_bytes().decode()
    assert "\r" not in text
    lines = text.splitlines()
    assert lines[0] == ",".join(CsvRow.header()) and len(lines) == 3
    rows = read_rows(str(out))
    assert rows[0]["seed"] == "0" and rows[1]["seed"] == "1"


@pytest.mark.parametrize("overrides", [
    MINIMAL,
    {**MINIMAL, "method": "plain", "law": "exp", "lambda": "0.4"},
    {**MINIMAL, "method": "resample", "case": "3", "rho": "0.5", "reps": 2},
    {"case": "2", "method": "euler", "h": "0.05", "npart": "3000"},
])
def test_run_parse_run_round_trip(overrides):
    first = run(parse_config(overrides={**overrides, "npart": overrides.get("npart", 3000)}))
    buf = io.StringIO()
    write_rows([first], stream=buf)
    row = read_rows(buf.getvalue())[0]
    extra = {"h": overrides["h"]} if "h" in overrides else {}
    again = run(config_from_row(row, **extra))
    a, b = dataclasses.asdict(first), dataclasses.asdict(again)
    a.pop("wall_time_s"), b.pop("wall_time_s")
    assert a == b


# -- run examples ----------------------------------------------------------------

def test_run_case2_antithetic_example():
    row = run(parse_config(overrides={**MINIMAL, "npart": 40_000, "reps": 100}))
    assert abs(row.mean - 0.1745) <= 0.0012
    assert row.stderr < 0.0015


def test_run_case2_euler_example():
    row = run(parse_config(overrides={"case": 2, "method": "euler", "h": repr(1 / 145),
                                      "npart": 432_025}))
    assert abs(row.mean - 0.1752) <= 0.001
    assert row.avg_switches == 145 and row.law == "" and row.rho == ""


def test_run_single_particle_resample():
    row = run(parse_config(overrides={**MINIMAL, "method": "resample", "npart": 1}))
    assert np.isfinite(row.mean)


def test_run_programmatic_case():
    spec = CaseSpec(case_id=0, model=constant_model(0.1, 0.3, [1.0]),
                    payoff=Payoff(g=lambda x: x[:, 0]))
    row = run(RunConfig(method="antithetic", n_part=20_000, case=spec))
    assert row.case == "0" and abs(row.mean - 1.1) < 4 * row.stderr


# -- studies ---------------------------------------------------------------------

def test_fit_slope():
    n = [1e4 * 4 ** q for q in range(5)]
    fit = fit_slope(n, [0.1 * v ** -0.5 for v in n])
    assert fit.slope == pytest.approx(-0.5) and not fit.unstable
    assert fit_slope(n[:2], [1.0, 0.5]).unstable
    noisy = fit_slope(n, [1.0, 0.3, 2.0, 0.2, 0.9])
    assert noisy.unstable and "UNSTABLE" in noisy.line()


def test_convergence_iid_slope():
    cfg = parse_config(overrides={**MINIMAL, "case": 1, "reps": 30})
    rows, fit = convergence_study(cfg, n0=1000, q_max=3)
    assert [r.n_part for r in rows] == [1000, 4000, 16000, 64000]
    assert abs(fit.slope + 0.5) < 0.1


def test_convergence_exponential_law_is_unstable():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FiniteVarianceWarning)
        cfg = parse_config(overrides={**MINIMAL, "case": 1, "law": "exp", "reps": 20})
        _, fit = convergence_study(cfg, n0=1000, q_max=3)
    assert fit.unstable


def test_convergence_needs_replications():
    with pytest.raises(ConfigError):
        convergence_study(parse_config(overrides=MINIMAL), q_max=2)
    with pytest.raises(ConfigError):
        convergence_study(parse_config(overrides={**MINIMAL, "reps": 3}), q_max=0)


def test_complexity_examples():
    assert poly_switch_count(0.5, 2.5) == pytest.approx(2.1125)
    rows = complexity_study([0.5], [1.0, 2.5, 5.0, 10.0], 100_000, seed=0)
    by_theta = {r[1]: r for r in rows}
    assert by_theta[2.5][7] < 0.15
    means = [r[3] for r in rows]
    assert all(np.diff(means) < 0)
    for r in rows:
        assert abs(r[3] - r[5]) < 0.02
    assert len(rows[0]) == len(COMPLEXITY_HEADER)
    lam = count_switches(exponential(0.4), 1.0, 100_000, RngStream(0, 0))
    assert abs(lam.mean() - 0.4) < 0.01


def test_euler_compare_degenerate_for_constant_model():
    spec = CaseSpec(case_id=0, model=constant_model(0.1, 0.3, [1.0]),
                    payoff=Payoff(g=lambda x: x[:, 0]))
    cfg = RunConfig(method="antithetic", case=spec)
    rows = euler_compare(cfg, [0.01], pilot=10_000, calibration=EulerCalibrationConfig(
        n_ref=20_000, h_fine=0.01, h_coarse=0.1))
    assert rows[0][-1] is True and np.isnan(rows[0][5])


def test_studies_are_byte_reproducible(tmp_path):
    outs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        assert main(["convergence", "--case", "2", "--method", "plain", "--npart", "1000",
                     "--reps", "3", "--seed", "4", "--output", str(out), "--n0", "500",
                     "--q-max", "1"]) == 0
        outs.append([",".join(r[f] for f in CsvRow.header() if f != "wall_time_s")
                     for r in read_rows(str(out))])
    assert outs[0] == outs[1]
    a, b = tmp_path / "k1.csv", tmp_path / "k2.csv"
    for p in (a, b):
        assert main(["complexity", "--samples", "2000", "--kappa-grid", "0.3,0.5",
                     "--theta-grid", "2.5", "--output", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


# -- entry point -----------------------------------------------------------------

def test_main_exit_codes(tmp_path, capsys):
    assert main(["run", "--case", "2", "--method", "plain", "--npart", "500"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("case,method") and len(out) == 2
    assert main(["run", "--case", "2"]) == 1
    assert "missing required key 'method'" in capsys.readouterr().err
    assert main(["run", "--bogus"]) == 1
    assert main(["run", "--case", "2", "--method", "plain", "--npart", "500",
                 "--output", str(tmp_path)]) == 2
    assert main(["cases"]) == 0
    listing = capsys.readouterr().out.splitlines()
    assert len(listing) == 6 and listing[1].startswith("2\td=1\tref=0.17466")
