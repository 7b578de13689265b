"""Command-line experiment harness.

Verbs
-----
``run``            one estimator run, one CSV row
``convergence``    the run repeated at ``n_part = 4**q * n0``, with a slope fit
``complexity``     mean number of switches over a (kappa, theta) grid
``euler-compare``  switching estimator versus a calibrated Euler scheme
``cases``          list the built-in cases

Configuration is a flat ``key = value`` file whose keys are the
:class:`RunConfig` field names; every key can also be given as a
``--kebab-case`` flag, and flags override the file.

Exit codes: 0 success, 1 configuration error, 2 runtime or model error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, fields
from typing import IO, Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .estimators import (
    EstimateResult,
    EulerCalibrationConfig,
    calibrate_euler,
    euler_estimate,
    switching_estimate,
)
from .model import BUILTIN_CASES, CaseSpec, ModelEvaluationError, builtin_case
from .numerics import RngStream, SingularMatrixError
from .particles import DegeneratePopulationError, PotentialParams, resampling_run
from .switching import (
    FiniteVarianceWarning,
    SwitchingLaw,
    count_switches,
    exponential,
    expected_switches,
    gamma,
    validate_kappa,
)

__all__ = [
    "ConfigError",
    "CsvRow",
    "RunConfig",
    "SlopeFit",
    "complexity_study",
    "config_from_row",
    "convergence_study",
    "euler_compare",
    "format_config",
    "main",
    "parse_config",
    "poly_switch_count",
    "read_rows",
    "run",
    "write_rows",
]

log = logging.getLogger("switchmc")

METHODS = ("plain", "antithetic", "resample", "euler")
LAWS = ("exp", "gamma")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


# -- configuration ---------------------------------------------------------

@dataclass
class RunConfig:
    """One experiment. ``case_id`` and ``method`` are required.

    ``lam`` is the exponential rate (key ``lambda`` in files and flags).
    ``rho`` defaults to ``1 - kappa`` for the resampling method; ``n_iter``
    defaults to the 99% absorption pre-pass. The Euler method takes
    either a step ``h`` (with ``n_part`` trajectories) or a target error
    ``eps``, in which case step and trajectory count come from a
    calibration run controlled by the ``calib_*`` keys.
    """

    case_id: Optional[int] = None
    method: Optional[str] = None
    law: str = "gamma"
    lam: float = 0.4
    kappa: float = 0.5
    theta: float = 2.5
    rho: Optional[float] = None
    n_part: int = 10_000
    reps: int = 1
    workers: int = 1
    n_iter: Optional[int] = None
    seed: int = 0
    output: Optional[str] = None
    h: Optional[float] = None
    eps: Optional[float] = None
    calib_n_ref: int = 200_000
    calib_h_fine: float = 0.002
    calib_h_coarse: float = 0.05
    case: Optional[CaseSpec] = dataclasses.field(default=None, repr=False, compare=False)

    def switching_law(self) -> SwitchingLaw:
        return exponential(self.lam) if self.law == "exp" else gamma(self.kappa, self.theta)

    def resolve_case(self) -> CaseSpec:
        return self.case if self.case is not None else builtin_case(self.case_id)

    def validate(self) -> "RunConfig":
        """Check ranges and cross-field requirements; returns ``self``."""
        if self.case is None:
            if self.case_id is None:
                raise ConfigError("missing required key 'case_id'")
            if self.case_id not in BUILTIN_CASES:
                raise ConfigError(f"case_id={self.case_id} is not one of {BUILTIN_CASES}")
        if self.method is None:
            raise ConfigError("missing required key 'method'")
        if self.method not in METHODS:
            raise ConfigError(f"method={self.method!r}; expected one of {', '.join(METHODS)}")
        if self.law not in LAWS:
            raise ConfigError(f"law={self.law!r}; expected 'exp' or 'gamma'")
        if self.law == "exp" and not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")
        if self.law == "gamma":
            if not self.kappa > 0:
                raise ConfigError(f"kappa must be > 0, got {self.kappa}")
            if not self.theta > 0:
                raise ConfigError(f"theta must be > 0, got {self.theta}")
        for key in ("n_part", "reps", "workers"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.n_iter is not None and self.n_iter < 1:
            raise ConfigError(f"n_iter must be >= 1, got {self.n_iter}")
        if self.method == "euler":
            if self.h is None and self.eps is None:
                raise ConfigError("method=euler requires 'h' or 'eps'")
            if self.h is not None and not self.h > 0:
                raise ConfigError(f"h must be > 0, got {self.h}")
            if self.eps is not None and not self.eps > 0:
                raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.method == "resample":
            if self.n_part // self.workers < 1:
                raise ConfigError(
                    f"n_part={self.n_part} gives no particle per worker (workers={self.workers})")
            try:
                self.potential_params()
            except ValueError as exc:
                raise ConfigError(f"resampling needs a gamma law with admissible rho: {exc}") from None
        if self.method != "euler":
            validate_kappa(self.switching_law(), self.resolve_case().model)
        return self

    def potential_params(self) -> PotentialParams:
        law = self.switching_law()
        return PotentialParams.for_law(law, self.rho)


_FIELD_TYPES = {
    "case_id": int, "method": str, "law": str, "lam": float, "kappa": float, "theta": float,
    "rho": float, "n_part": int, "reps": int, "workers": int, "n_iter": int, "seed": int,
    "output": str, "h": float, "eps": float, "calib_n_ref": int, "calib_h_fine": float,
    "calib_h_coarse": float,
}
_KEY_ALIASES = {"lambda": "lam", "case": "case_id", "npart": "n_part"}


def _canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    return _KEY_ALIASES.get(key, key)


def _convert(key: str, raw, where: str = ""):
    if raw is None:
        return None
    typ = _FIELD_TYPES[key]
    if isinstance(raw, str):
        raw = raw.strip()
        if raw.lower() in ("", "none", "null"):
            return None
    try:
        if typ is int:
            try:
                return int(raw)
            except ValueError:
                val = float(raw)  # accept "1e4"-style counts
                if not val.is_integer():
                    raise
                return int(val)
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}key '{key}': cannot read {raw!r} as {typ.__name__}") from None


def read_config_file(path: str) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = body.split("=", 1)
        key = _canonical_key(key)
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value, f"{path}:{lineno}: ")
    return out


def parse_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from a file and/or flag values.

    ``overrides`` values (flags) take precedence over file values; ``None``
    entries in ``overrides`` are ignored.
    """
    values = read_config_file(path) if path else {}
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        key = _canonical_key(key)
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(**values).validate()


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`read_config_file` (``None`` values omitted)."""
    lines = []
    for f in fields(RunConfig):
        if f.name == "case":
            continue
        val = getattr(cfg, f.name)
        if val is None:
            continue
        key = "lambda" if f.name == "lam" else f.name
        lines.append(f"{key} = {val!r}" if isinstance(val, float) else f"{key} = {val}")
    return "\n".join(lines) + "\n"


# -- CSV rows --------------------------------------------------------------

@dataclass
class CsvRow:
    case: str
    method: str
    law: str
    kappa: str
    theta: str
    rho: str
    n_part: int
    reps: int
    mean: float
    stderr: float
    avg_switches: float
    wall_time_s: float
    seed: int

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def cells(self) -> list[str]:
        return [_cell(getattr(self, name)) for name in self.header()]


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _writer(fh: IO[str]):
    return csv.writer(fh, lineterminator="\n")


def write_rows(rows: Iterable, path: Optional[str] = None, stream: Optional[IO[str]] = None,
               header: Optional[Sequence[str]] = None) -> None:
    """Append ``rows`` to ``path`` (header only if the file is new or empty)
    or write them, with header, to ``stream``."""
    rows = list(rows)
    if header is None:
        header = rows[0].header() if rows else CsvRow.header()

    def cells(r):
        return r.cells() if hasattr(r, "cells") else [_cell(v) for v in r]

    if path:
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", encoding="utf-8", newline="") as fh:
            w = _writer(fh)
            if fresh:
                w.writerow(header)
            for r in rows:
                w.writerow(cells(r))
    else:
        w = _writer(stream or sys.stdout)
        w.writerow(header)
        for r in rows:
            w.writerow(cells(r))


def read_rows(path_or_text: str) -> list[dict]:
    """Read a CSV file (or CSV text) into dictionaries keyed by header."""
    if os.path.exists(path_or_text):
        with open(path_or_text, encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh))
    return list(csv.DictReader(io.StringIO(path_or_text)))


def config_from_row(row: dict, **extra) -> RunConfig:
    """Rebuild the configuration that produced a :class:`CsvRow`."""
    values = {"case_id": row["case"], "method": row["method"], "n_part": row["n_part"],
              "reps": row["reps"], "seed": row["seed"]}
    if row.get("law"):
        values["law"] = row["law"]
        if row["law"] == "exp":
            values["lambda"] = 1.0 / float(row["theta"])
        else:
            values["kappa"], values["theta"] = row["kappa"], row["theta"]
    if row.get("rho"):
        values["rho"] = row["rho"]
    values.update(extra)
    return parse_config(overrides=values)


# -- run -------------------------------------------------------------------

def _execute(cfg: RunConfig) -> EstimateResult:
    spec = cfg.resolve_case()
    model, payoff = spec.model, spec.payoff
    if cfg.method == "euler":
        h, n_e = cfg.h, cfg.n_part
        if h is None:
            cal = calibrate_euler(model, payoff, EulerCalibrationConfig(
                n_ref=cfg.calib_n_ref, h_fine=cfg.calib_h_fine, h_coarse=cfg.calib_h_coarse,
                seed=cfg.seed, workers=cfg.workers))
            if cal.degenerate:
                raise ModelEvaluationError(cal.message)
            h, n_e = cal.h_for(cfg.eps), cal.n_for(cfg.eps)
        return euler_estimate(model, payoff, h, n_e, workers=cfg.workers, seed=cfg.seed,
                              reps=cfg.reps)
    law = cfg.switching_law()
    if cfg.method == "resample":
        return resampling_run(model, payoff, law, cfg.potential_params(), cfg.n_part,
                              reps=cfg.reps, workers=cfg.workers, seed=cfg.seed,
                              n_iter=cfg.n_iter)
    return switching_estimate(model, payoff, law, cfg.n_part, reps=cfg.reps,
                              workers=cfg.workers, seed=cfg.seed,
                              antithetic=cfg.method == "antithetic")


def _row(cfg: RunConfig, res: EstimateResult) -> CsvRow:
    if cfg.method == "euler":
        law = kappa = theta = ""
    else:
        lw = cfg.switching_law()
        law, kappa, theta = lw.kind, repr(lw.kappa), repr(lw.theta)
    rho = repr(cfg.potential_params().rho) if cfg.method == "resample" else ""
    case = str(cfg.case_id) if cfg.case is None else str(cfg.case.case_id)
    return CsvRow(case=case, method=cfg.method, law=law, kappa=kappa, theta=theta, rho=rho,
                  n_part=res.n_part, reps=res.reps, mean=float(res.mean),
                  stderr=float(res.std_error), avg_switches=float(res.avg_switches),
                  wall_time_s=float(res.wall_time_s), seed=cfg.seed)


def run(config: RunConfig, write: bool = True) -> CsvRow:
    """Execute one configuration and (optionally) append its row to ``output``."""
    config.validate()
    row = _row(config, _execute(config))
    if write and config.output:
        write_rows([row], config.output)
    return row


# -- studies ---------------------------------------------------------------

@dataclass(frozen=True)
class SlopeFit:
    """Least-squares slope of log(stdev) against log(n_part)."""

    slope: float
    stderr: float
    ci_halfwidth: float
    unstable: bool

    def line(self) -> str:
        flag = " UNSTABLE" if self.unstable else ""
        return f"slope={self.slope:.4f} stderr={self.stderr:.4f} ci95=+-{self.ci_halfwidth:.4f}{flag}"


def fit_slope(n_parts: Sequence[float], stdevs: Sequence[float], max_halfwidth: float = 0.1) -> SlopeFit:
    """Fit ``log sd = a + slope log n``; ``unstable`` when the 95% interval
    is wider than ``+-max_halfwidth`` (or the fit is undefined)."""
    x = np.log(np.asarray(n_parts, dtype=float))
    y = np.log(np.asarray(stdevs, dtype=float))
    if x.size < 2 or not np.all(np.isfinite(y)):
        return SlopeFit(float("nan"), float("nan"), float("inf"), True)
    fit = stats.linregress(x, y)
    if x.size > 2:
        half = float(stats.t.ppf(0.975, x.size - 2) * fit.stderr)
    else:
        half = float("inf")
    return SlopeFit(float(fit.slope), float(fit.stderr), half, not half <= max_halfwidth)


def convergence_study(config: RunConfig, n0: int = 10_000, q_max: int = 5):
    """Run ``config`` at ``n_part = 4**q * n0`` for ``q = 0..q_max``.

    Returns ``(rows, fit)`` where ``fit`` regresses the replication
    standard deviation on ``n_part``; ``reps >= 2`` is required.
    """
    if q_max < 1:
        raise ConfigError("q_max must be >= 1")
    if config.reps < 2:
        raise ConfigError("convergence study needs reps >= 2")
    rows, n_parts, sds = [], [], []
    for q in range(q_max + 1):
        cfg = dataclasses.replace(config, n_part=n0 * 4 ** q).validate()
        res = _execute(cfg)
        rows.append(_row(cfg, res))
        n_parts.append(cfg.n_part)
        sds.append(res.replication_stdev)
    return rows, fit_slope(n_parts, sds)


def poly_switch_count(kappa: float, theta: float) -> float:
    """Fitted polynomial for the mean number of time steps on ``[0, 1]``."""
    return 15.84 - 1.63 * theta - 46.16 * kappa + 46.36 * kappa ** 2 + 1.47 * theta * kappa


COMPLEXITY_HEADER = ["kappa", "theta", "samples", "mean_switches", "mean_steps",
                     "exact_mean_switches", "polynomial", "rel_gap"]


def complexity_study(kappa_grid: Sequence[float], theta_grid: Sequence[float], samples: int,
                     seed: int = 0, horizon: float = 1.0) -> list[list]:
    """Mean switch counts over a grid, compared with the fitted polynomial.

    Each row holds the simulated ``N_T`` mean, the step count ``N_T + 1``
    (which the polynomial describes), the exact renewal value of
    ``E[N_T]``, the polynomial and the relative gap
    ``|mean_steps - poly| / |poly|``.
    """
    rows = []
    for i, kappa in enumerate(kappa_grid):
        for j, theta in enumerate(theta_grid):
            law = gamma(kappa, theta)
            counts = count_switches(law, horizon, samples, RngStream(seed, (7, i, j)))
            mean_sw = float(np.mean(counts))
            poly = poly_switch_count(kappa, theta)
            steps = mean_sw + 1.0
            gap = abs(steps - poly) / abs(poly) if poly != 0 else float("inf")
            rows.append([float(kappa), float(theta), int(samples), mean_sw, steps,
                         expected_switches(law, horizon), poly, gap])
    return rows


EULER_HEADER = ["eps", "smc_mean", "smc_stderr", "smc_n_part", "smc_time_s", "emc_mean",
                "emc_stderr", "emc_n_E", "emc_steps", "emc_h", "emc_time_s", "C_E_hat",
                "S_hat", "calibration_degenerate"]


def euler_compare(config: RunConfig, eps_list: Sequence[float], pilot: int = 100_000,
                  calibration: Optional[EulerCalibrationConfig] = None) -> list[list]:
    """Switching estimator and calibrated Euler scheme sized for each ``eps``.

    The switching run uses ``config.method`` (antithetic by default) with
    ``n_part = (sd / eps)**2`` from a pilot of ``pilot`` draws, so its
    standard error is about ``eps``. The Euler scheme uses
    ``h = eps / (2 C_E)`` and ``n_E = (2 S / eps)**2``. A degenerate
    calibration leaves the Euler columns as NaN.
    """
    method = config.method if config.method in ("plain", "antithetic", "resample") else "antithetic"
    base = dataclasses.replace(config, method=method, reps=1).validate()
    spec = base.resolve_case()
    cal = calibrate_euler(spec.model, spec.payoff, calibration or EulerCalibrationConfig(
        n_ref=config.calib_n_ref, h_fine=config.calib_h_fine, h_coarse=config.calib_h_coarse,
        seed=config.seed, workers=config.workers))
    if cal.degenerate:
        log.warning("%s", cal.message)
    if method == "resample":
        pilot_res = _execute(dataclasses.replace(base, n_part=pilot, reps=10))
        sd = pilot_res.replication_stdev * math.sqrt(pilot)
    else:
        pilot_res = _execute(dataclasses.replace(base, n_part=pilot, seed=config.seed + 1))
        sd = pilot_res.std_error * math.sqrt(pilot)
    rows = []
    nan = float("nan")
    for eps in eps_list:
        n_smc = max(int(math.ceil((sd / eps) ** 2)), 1)
        smc = _execute(dataclasses.replace(base, n_part=n_smc))
        if cal.degenerate:
            emc_vals = [nan, nan, 0, 0, nan, nan]
        else:
            h = cal.h_for(eps)
            n_e = cal.n_for(eps)
            emc = euler_estimate(spec.model, spec.payoff, h, n_e, workers=config.workers,
                                 seed=config.seed)
            emc_vals = [emc.mean, emc.std_error, n_e, int(emc.avg_switches), h, emc.wall_time_s]
        rows.append([float(eps), smc.mean, smc.std_error, n_smc, smc.wall_time_s, *emc_vals,
                     cal.C_E_hat, cal.S_hat, bool(cal.degenerate)])
    return rows


# -- argument parsing ------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    s = argparse.SUPPRESS
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--case-id", "--case", dest="case_id", default=s)
    p.add_argument("--method", default=s, help="plain | antithetic | resample | euler")
    p.add_argument("--law", default=s, help="exp | gamma")
    p.add_argument("--lambda", "--lam", dest="lam", default=s, help="exponential rate")
    p.add_argument("--kappa", default=s)
    p.add_argument("--theta", default=s)
    p.add_argument("--rho", default=s)
    p.add_argument("--n-part", "--npart", dest="n_part", default=s)
    p.add_argument("--reps", default=s)
    p.add_argument("--workers", default=s)
    p.add_argument("--n-iter", dest="n_iter", default=s)
    p.add_argument("--seed", default=s)
    p.add_argument("--output", "-o", default=s, help="CSV file to append to")
    p.add_argument("--h", default=s, help="Euler step")
    p.add_argument("--eps", default=s, help="target error for a calibrated Euler run")
    p.add_argument("--calib-n-ref", dest="calib_n_ref", default=s)
    p.add_argument("--calib-h-fine", dest="calib_h_fine", default=s)
    p.add_argument("--calib-h-coarse", dest="calib_h_coarse", default=s)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="switchmc",
                                     description="Unbiased regime-switching Monte Carlo for SDEs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="one estimator run")
    _add_config_flags(p)

    p = sub.add_parser("convergence", help="stdev versus n_part = 4^q n0")
    _add_config_flags(p)
    p.add_argument("--n0", type=int, default=10_000)
    p.add_argument("--q-max", dest="q_max", type=int, default=5)

    p = sub.add_parser("complexity", help="mean number of switches over a grid")
    p.add_argument("--kappa-grid", type=_float_list, default=[0.2, 0.3, 0.4, 0.5])
    p.add_argument("--theta-grid", type=_float_list, default=[1.0, 2.5, 5.0, 10.0])
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o")

    p = sub.add_parser("euler-compare", help="switching estimator vs calibrated Euler")
    _add_config_flags(p)
    p.add_argument("--eps-list", type=_float_list, default=[8e-4, 4e-4])
    p.add_argument("--pilot", type=int, default=100_000)

    sub.add_parser("cases", help="list built-in cases")
    return parser


def _overrides(ns: argparse.Namespace) -> dict:
    return {k: getattr(ns, k) for k in _FIELD_TYPES if hasattr(ns, k)}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    warnings.simplefilter("default", FiniteVarianceWarning)
    logging.captureWarnings(True)
    try:
        if ns.verb == "cases":
            for cid in BUILTIN_CASES:
                c = builtin_case(cid)
                ref = "-" if c.reference_value is None else f"{c.reference_value:g}"
                print(f"{cid}\td={c.model.d}\tref={ref}\t{c.description}")
            return 0
        if ns.verb == "complexity":
            if ns.samples < 1:
                raise ConfigError("samples must be >= 1")
            rows = complexity_study(ns.kappa_grid, ns.theta_grid, ns.samples, ns.seed)
            write_rows(rows, ns.output, header=COMPLEXITY_HEADER)
            return 0
        if ns.verb == "euler-compare" and not hasattr(ns, "method"):
            ns.method = "antithetic"
        cfg = parse_config(ns.config, _overrides(ns))
        if ns.verb == "run":
            row = run(cfg, write=True)
            if not cfg.output:
                write_rows([row])
        elif ns.verb == "convergence":
            rows, fit = convergence_study(cfg, ns.n0, ns.q_max)
            write_rows(rows, cfg.output)
            print(fit.line(), file=sys.stderr)
        elif ns.verb == "euler-compare":
            rows = euler_compare(cfg, ns.eps_list, pilot=ns.pilot)
            write_rows(rows, cfg.output, header=EULER_HEADER)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ModelEvaluationError, DegeneratePopulationError, SingularMatrixError,
            ArithmeticError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
