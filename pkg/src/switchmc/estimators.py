"""Unbiased switching estimators, the replication driver and the Euler baseline.

All path simulation is vectorised: a batch of independent draws is advanced
in lockstep, one switching step at a time, and draws leave the batch as
soon as their mesh reaches the horizon.

Reproducibility contract
------------------------
A replication of ``n_part`` draws is cut into fixed-size blocks. Block ``j``
of replication ``r`` always consumes the stream ``(tag, r, j)`` whatever the
number of workers, and block sums are combined with :func:`math.fsum`, so
results are bit-identical under any worker count or scheduling order.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .chain import SwitchPath, first_weight, second_weight
from .model import Payoff, SdeModel, SingularDiffusionError, drift_of, sigma_of
from .numerics import RngStream, SingularMatrixError, lu_inverse
from .switching import SwitchingLaw, SwitchMesh, density, sample, survival

__all__ = [
    "BLOCK_SIZE",
    "DrawBatch",
    "EstimateResult",
    "EulerCalibration",
    "EulerCalibrationConfig",
    "antithetic_single",
    "calibrate_euler",
    "euler_draws",
    "euler_estimate",
    "plain_single",
    "run_monte_carlo",
    "run_units",
    "switching_draws",
    "switching_estimate",
]

BLOCK_SIZE = 1 << 15

# stream-domain tags, so different estimators never share substreams
TAG_PLAIN, TAG_ANTITHETIC, TAG_RESAMPLE, TAG_EULER, TAG_CALIBRATION = range(5)


@dataclass
class EstimateResult:
    """Replication statistics of one estimator run.

    With ``reps > 1`` the spread of the replication means defines the
    error; with ``reps == 1`` it is estimated from the single-draw
    dispersion inside the one replication.
    """

    mean: float
    std_error: float
    replication_stdev: float
    n_part: int
    reps: int
    avg_switches: float
    wall_time_s: float
    replicates: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)


@dataclass
class DrawBatch:
    plain: np.ndarray
    antithetic: np.ndarray
    n_switch: np.ndarray
    paths: Optional[list] = None


@dataclass
class _UnitStats:
    total: float
    total_sq: float
    count: int
    switches: float


def _coefficients(model: SdeModel, t, x):
    b = drift_of(model, t, x)
    sig = sigma_of(model, t, x)
    a = sig @ np.swapaxes(sig, -1, -2)
    try:
        sinv = lu_inverse(sig)
    except SingularMatrixError as exc:
        raise SingularDiffusionError(str(exc)) from exc
    return b, sig, a, sinv


def switching_draws(model: SdeModel, payoff: Payoff, law: SwitchingLaw, n: int,
                    stream: RngStream, record: bool = False) -> DrawBatch:
    """Simulate ``n`` independent meshes and chains; return both estimators.

    ``plain[i]`` is ``g(X_{N+1}) / (1 - F(dT_{N+1})) * prod_{k=2}^{N+1} P_k``
    and ``antithetic[i]`` is the mirrored terminal form
    ``beta * prod_{k=2}^{N} P_k`` (``g(X_1) / (1 - F(dT_1))`` when ``N = 0``),
    both evaluated on the same realisation. With ``record=True`` the raw
    paths are also returned as :class:`~switchmc.chain.SwitchPath` objects.
    """
    d, T = model.d, model.T
    t = np.full(n, float(model.t0))
    x = np.broadcast_to(model.x0, (n, d)).copy()
    b, sig, a, sinv = _coefficients(model, t, x)
    idx = np.arange(n)
    prod = np.ones(n)
    plain = np.empty(n)
    anti = np.empty(n)
    nsw = np.empty(n, dtype=np.int64)
    b_prev = a_prev = dt_prev = None
    log = [] if record else None
    k = 0
    while idx.size:
        m = idx.size
        tau = sample(law, stream, m)
        hit = t + tau >= T
        dt = np.where(hit, T - t, tau)
        dW = np.sqrt(dt)[:, None] * stream.normal((m, d))
        mean_step = x + b * dt[:, None]
        noise = np.einsum("nij,nj->ni", sig, dW)
        x_new = mean_step + noise
        if k >= 1:
            M = first_weight(b - b_prev, sinv, dW, dt)
            V = second_weight(a - a_prev, sinv, dW, dt)
            f_prev = density(law, dt_prev)
            P = (M + 0.5 * V) / f_prev
        if record:
            log.append((idx.copy(), np.where(hit, T, t + tau), dt.copy(), x_new.copy(),
                        dW.copy(), (mean_step - noise).copy(), hit.copy()))
        if hit.any():
            h = np.flatnonzero(hit)
            surv = survival(law, dt[h])
            g_end = payoff(x_new[h])
            if k == 0:
                plain[idx[h]] = g_end / surv
                anti[idx[h]] = g_end / surv
            else:
                plain[idx[h]] = g_end / surv * prod[h] * P[h]
                g_mid = payoff(x[h])
                g_hat = payoff(mean_step[h] - noise[h])
                half_v = 0.5 * V[h]
                beta = 0.5 * ((g_end - g_mid) * (M[h] + half_v)
                              + (g_hat - g_mid) * (half_v - M[h])) / (surv * f_prev[h])
                anti[idx[h]] = beta * prod[h]
            nsw[idx[h]] = k
        live = np.flatnonzero(~hit)
        prod = prod[live] * P[live] if k >= 1 else prod[live]
        idx = idx[live]
        b_prev, a_prev, dt_prev = b[live], a[live], dt[live]
        t = t[live] + tau[live]
        x = x_new[live]
        if idx.size:
            b, sig, a, sinv = _coefficients(model, t, x)
        k += 1
    paths = _assemble_paths(model, n, log) if record else None
    return DrawBatch(plain=plain, antithetic=anti, n_switch=nsw, paths=paths)


def _assemble_paths(model: SdeModel, n: int, log) -> list:
    times = [[model.t0] for _ in range(n)]
    states = [[model.x0.copy()] for _ in range(n)]
    steps = [[] for _ in range(n)]
    incs = [[] for _ in range(n)]
    mirror = [None] * n
    for idx, t_new, dt, x_new, dW, x_hat, hit in log:
        for j, i in enumerate(idx):
            times[i].append(float(t_new[j]))
            steps[i].append(float(dt[j]))
            states[i].append(x_new[j])
            incs[i].append(dW[j])
            if hit[j]:
                mirror[i] = x_hat[j]
    return [SwitchPath(mesh=SwitchMesh(np.asarray(times[i]), np.asarray(steps[i])), states=np.asarray(states[i]),
                       brownian=np.asarray(incs[i]), mirror_last=mirror[i])
            for i in range(n)]


def plain_single(model: SdeModel, payoff: Payoff, law: SwitchingLaw, stream: RngStream) -> float:
    """One draw of the plain switching representation."""
    return float(switching_draws(model, payoff, law, 1, stream).plain[0])


def antithetic_single(model: SdeModel, payoff: Payoff, law: SwitchingLaw, stream: RngStream) -> float:
    """One draw of the antithetic switching representation."""
    return float(switching_draws(model, payoff, law, 1, stream).antithetic[0])


# -- replication driver ----------------------------------------------------

def run_units(unit_fn: Callable[[int, RngStream], _UnitStats], n_units: int, reps: int,
              workers: int, seed: int, tag: int, split: Sequence[int] = ()):
    """Evaluate ``unit_fn`` on every ``(rep, unit)`` pair with its own stream.

    Returns a ``(reps, n_units)`` nested list of unit results.
    """
    jobs = [(r, j) for r in range(reps) for j in range(n_units)]

    def one(job):
        r, j = job
        return unit_fn(j, RngStream(seed, (tag, *split, r, j)))

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flat = list(pool.map(one, jobs))
    else:
        flat = [one(job) for job in jobs]
    return [flat[r * n_units:(r + 1) * n_units] for r in range(reps)]


def _summarise(per_rep, n_part: int, reps: int, wall: float) -> EstimateResult:
    means = np.empty(reps)
    sw = 0.0
    count = 0
    within = []
    for r, units in enumerate(per_rep):
        total = math.fsum(u.total for u in units)
        cnt = sum(u.count for u in units)
        means[r] = total / cnt
        if reps == 1:
            sq = math.fsum(u.total_sq for u in units)
            within.append(max(sq / cnt - means[r] ** 2, 0.0) * cnt / max(cnt - 1, 1))
        sw += math.fsum(u.switches for u in units)
        count += cnt
    mean = float(math.fsum(means) / reps)
    if reps > 1:
        rep_sd = float(np.std(means, ddof=1))
        se = rep_sd / math.sqrt(reps)
    else:
        rep_sd = math.sqrt(within[0] / n_part)
        se = rep_sd
    return EstimateResult(mean=mean, std_error=se, replication_stdev=rep_sd, n_part=n_part,
                          reps=reps, avg_switches=sw / count, wall_time_s=wall,
                          replicates=means)


def _block_sizes(n_part: int, block_size: int) -> list[int]:
    full, rem = divmod(n_part, block_size)
    return [block_size] * full + ([rem] if rem else [])


def run_monte_carlo(sampler: Callable, n_part: int, reps: int = 1, workers: int = 1,
                    seed: int = 0, tag: int = 0, block_size: int = BLOCK_SIZE) -> EstimateResult:
    """Average i.i.d. draws over ``reps`` independent replications.

    Parameters
    ----------
    sampler : callable
        ``sampler(n, stream)`` returns ``n`` draws, or a pair
        ``(draws, switch_counts)``.
    n_part : int
        Draws per replication.
    reps : int
        Number of independent replications.
    workers : int
        Threads used to evaluate blocks; never changes the result.
    """
    if n_part < 1 or reps < 1:
        raise ValueError("n_part and reps must be >= 1")
    sizes = _block_sizes(n_part, block_size)

    def unit(j, stream):
        out = sampler(sizes[j], stream)
        if isinstance(out, tuple):
            vals, sw = out
            sw_total = float(np.sum(sw))
        else:
            vals, sw_total = out, 0.0
        vals = np.asarray(vals, dtype=float)
        if vals.shape != (sizes[j],):
            vals = np.broadcast_to(vals, (sizes[j],))
        return _UnitStats(float(np.sum(vals)), float(np.dot(vals, vals)), vals.size, sw_total)

    start = time.perf_counter()
    per_rep = run_units(unit, len(sizes), reps, workers, seed, tag)
    return _summarise(per_rep, n_part, reps, time.perf_counter() - start)


def switching_estimate(model: SdeModel, payoff: Payoff, law: SwitchingLaw, n_part: int,
                       reps: int = 1, workers: int = 1, seed: int = 0,
                       antithetic: bool = True) -> EstimateResult:
    """Replicated plain or antithetic switching estimate of ``E[g(X_T)]``."""
    field_name = "antithetic" if antithetic else "plain"

    def sampler(n, stream):
        batch = switching_draws(model, payoff, law, n, stream)
        return getattr(batch, field_name), batch.n_switch

    tag = TAG_ANTITHETIC if antithetic else TAG_PLAIN
    return run_monte_carlo(sampler, n_part, reps, workers, seed, tag)


# -- Euler-Maruyama baseline -----------------------------------------------

def _euler_grid(horizon: float, h: float) -> np.ndarray:
    """Step lengths: full steps of ``h`` plus one final short step if needed."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    n_full = int(math.floor(horizon / h * (1 + 1e-12)))
    steps = [h] * n_full
    rem = horizon - n_full * h
    if rem > 1e-12 * horizon:
        steps.append(rem)
    return np.asarray(steps)


def euler_draws(model: SdeModel, payoff: Payoff, h: float, n: int, stream: RngStream) -> np.ndarray:
    """``g(X_T)`` for ``n`` explicit Euler trajectories with step ``h``."""
    steps = _euler_grid(model.horizon, h)
    x = np.broadcast_to(model.x0, (n, model.d)).copy()
    t = float(model.t0)
    for dt in steps:
        z = stream.normal((n, model.d))
        sig = sigma_of(model, t, x)
        x = x + drift_of(model, t, x) * dt + math.sqrt(dt) * np.einsum("nij,nj->ni", sig, z)
        t += dt
    return payoff(x)


def euler_estimate(model: SdeModel, payoff: Payoff, h: float, n_E: int, workers: int = 1,
                   seed: int = 0, reps: int = 1) -> EstimateResult:
    def sampler(n, stream):
        return euler_draws(model, payoff, h, n, stream)

    res = run_monte_carlo(sampler, n_E, reps, workers, seed, TAG_EULER)
    res.avg_switches = float(len(_euler_grid(model.horizon, h)))
    return res


@dataclass(frozen=True)
class EulerCalibrationConfig:
    n_ref: int = 1_000_000
    h_fine: float = 1e-3
    h_coarse: float = 1e-2
    seed: int = 0
    workers: int = 1


@dataclass(frozen=True)
class EulerCalibration:
    """Bias and dispersion constants of the Euler scheme.

    ``bias ~ C_E_hat * h`` and ``stdev ~ S_hat / sqrt(n_E)``.
    """

    C_E_hat: float
    S_hat: float
    reference_value: float
    bias_coarse: float = 0.0
    bias_stderr: float = 0.0
    degenerate: bool = False
    message: str = ""

    def h_for(self, eps: float) -> float:
        """Step balancing the bias at ``eps / 2``."""
        if self.degenerate or self.C_E_hat <= 0:
            raise ValueError("degenerate calibration: no measurable Euler bias")
        return eps / (2.0 * self.C_E_hat)

    def n_for(self, eps: float) -> int:
        """Trajectory count bringing the standard deviation to ``eps / 2``."""
        return int(math.ceil((2.0 * self.S_hat / eps) ** 2))

    def steps_for(self, eps: float, horizon: float = 1.0) -> int:
        return int(math.ceil(horizon / self.h_for(eps) - 1e-9))


def calibrate_euler(model: SdeModel, payoff: Payoff,
                    cfg: EulerCalibrationConfig = EulerCalibrationConfig()) -> EulerCalibration:
    """Estimate ``C_E`` and ``S`` from coupled fine/coarse Euler runs.

    Fine and coarse trajectories share their Brownian path (coarse
    increments are sums of ``h_coarse / h_fine`` fine ones), so the bias
    gap ``E[g_coarse - g_fine] = C_E (h_coarse - h_fine)`` is measured with
    a far smaller variance than two independent runs would give. The fine
    run also provides the reference value and ``S_hat``.
    """
    horizon = model.horizon
    n_fine = int(round(horizon / cfg.h_fine))
    ratio = int(round(cfg.h_coarse / cfg.h_fine))
    if abs(n_fine * cfg.h_fine - horizon) > 1e-9 * horizon or n_fine % ratio:
        raise ValueError("calibration needs h_fine | horizon and h_fine | h_coarse")
    if abs(ratio * cfg.h_fine - cfg.h_coarse) > 1e-12:
        raise ValueError("h_coarse must be an integer multiple of h_fine")
    hf, hc = cfg.h_fine, cfg.h_coarse
    sizes = _block_sizes(cfg.n_ref, BLOCK_SIZE)

    def unit(j, stream):
        n = sizes[j]
        xf = np.broadcast_to(model.x0, (n, model.d)).copy()
        xc = xf.copy()
        acc = np.zeros((n, model.d))
        for step in range(n_fine):
            t = model.t0 + step * hf
            dW = math.sqrt(hf) * stream.normal((n, model.d))
            xf = xf + drift_of(model, t, xf) * hf + np.einsum("nij,nj->ni", sigma_of(model, t, xf), dW)
            acc += dW
            if (step + 1) % ratio == 0:
                tc = model.t0 + (step + 1 - ratio) * hf
                xc = xc + drift_of(model, tc, xc) * hc + np.einsum("nij,nj->ni", sigma_of(model, tc, xc), acc)
                acc[:] = 0.0
        gf = payoff(xf)
        diff = payoff(xc) - gf
        return (float(np.sum(gf)), float(np.dot(gf, gf)),
                float(np.sum(diff)), float(np.dot(diff, diff)), n)

    parts = run_units(unit, len(sizes), 1, cfg.workers, cfg.seed, TAG_CALIBRATION)[0]
    n = sum(p[4] for p in parts)
    mean_f = math.fsum(p[0] for p in parts) / n
    var_f = max(math.fsum(p[1] for p in parts) / n - mean_f ** 2, 0.0) * n / (n - 1)
    mean_d = math.fsum(p[2] for p in parts) / n
    var_d = max(math.fsum(p[3] for p in parts) / n - mean_d ** 2, 0.0) * n / (n - 1)
    se_d = math.sqrt(var_d / n)
    c_e = abs(mean_d) / (hc - hf)
    degenerate = not abs(mean_d) > 3.0 * se_d + 1e-12 * (1.0 + abs(mean_f))
    msg = ""
    if degenerate:
        msg = (f"Euler bias gap {mean_d:.3g} is within 3 stderr ({se_d:.3g}) of zero; "
               "calibration is degenerate")
    return EulerCalibration(C_E_hat=c_e, S_hat=math.sqrt(var_f), reference_value=mean_f,
                            bias_coarse=mean_d, bias_stderr=se_d, degenerate=degenerate,
                            message=msg)
