"""Switching-time laws and the random absorbing mesh on ``[t0, T]``."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .numerics import RngStream

__all__ = [
    "FiniteVarianceWarning",
    "SwitchMesh",
    "SwitchingLaw",
    "count_switches",
    "density",
    "expected_switches",
    "exponential",
    "gamma",
    "mesh_from_taus",
    "sample",
    "sample_gamma",
    "simulate_mesh",
    "survival",
    "validate_kappa",
]


class FiniteVarianceWarning(UserWarning):
    """Switching parameters fall outside the finite-variance regime."""


@dataclass(frozen=True)
class SwitchingLaw:
    """Exponential(rate) or Gamma(shape, scale) switching-time law.

    ``kind`` is ``"exp"`` or ``"gamma"``. An exponential law with rate
    ``lam`` is stored with ``kappa = 1`` and ``theta = 1 / lam``.
    """

    kind: str
    kappa: float
    theta: float

    def __post_init__(self):
        if self.kind not in ("exp", "gamma"):
            raise ValueError(f"unknown law {self.kind!r}")
        if not (self.kappa > 0 and self.theta > 0):
            raise ValueError(
                f"law parameters must be positive (kappa={self.kappa}, theta={self.theta})"
            )
        if self.kind == "exp" and self.kappa != 1.0:
            raise ValueError("exponential law requires kappa == 1")

    @property
    def rate(self) -> float:
        return 1.0 / self.theta

    @property
    def mean(self) -> float:
        return self.kappa * self.theta

    def __str__(self) -> str:
        if self.kind == "exp":
            return f"exp(lambda={self.rate:g})"
        return f"gamma(kappa={self.kappa:g}, theta={self.theta:g})"


def exponential(lam: float) -> SwitchingLaw:
    if not lam > 0:
        raise ValueError(f"rate must be positive, got {lam}")
    return SwitchingLaw("exp", 1.0, 1.0 / lam)


def gamma(kappa: float, theta: float) -> SwitchingLaw:
    return SwitchingLaw("gamma", float(kappa), float(theta))


def density(law: SwitchingLaw, s):
    """Density ``f(s)`` for ``s > 0``; raises ``ValueError`` otherwise."""
    s = np.asarray(s, dtype=float)
    if np.any(~(s > 0)):
        raise ValueError("switching density is only defined for s > 0")
    if law.kind == "exp":
        out = law.rate * np.exp(-law.rate * s)
    else:
        k, th = law.kappa, law.theta
        logf = (k - 1.0) * np.log(s) - s / th - special.gammaln(k) - k * math.log(th)
        out = np.exp(logf)
    return float(out) if out.ndim == 0 else out


def survival(law: SwitchingLaw, s):
    """``1 - F(s)`` for ``s >= 0``.

    The gamma branch uses the regularised upper incomplete gamma function,
    which stays accurate in the far tail where ``1 - F`` computed by
    subtraction would cancel.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("survival is only defined for s >= 0")
    if law.kind == "exp":
        out = np.exp(-law.rate * s)
    else:
        out = special.gammaincc(law.kappa, s / law.theta)
    return float(out) if out.ndim == 0 else out


def sample_gamma(stream: RngStream, shape: float, size: int) -> np.ndarray:
    """Unit-scale Gamma(shape) variates by Marsaglia-Tsang rejection.

    For ``shape < 1`` the boosted form is used: draw Gamma(shape + 1) and
    multiply by ``U ** (1 / shape)``.
    """
    boost = shape < 1.0
    a = shape + 1.0 if boost else shape
    dd = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * dd)
    out = np.empty(size)
    todo = np.arange(size)
    while todo.size:
        m = todo.size
        z = stream.normal(m)
        u = stream.uniform(m)
        v = 1.0 + c * z
        ok = v > 0.0
        v3 = np.where(ok, v * v * v, 1.0)
        with np.errstate(divide="ignore"):
            ok &= np.log(u) < 0.5 * z * z + dd - dd * v3 + dd * np.log(v3)
        out[todo[ok]] = dd * v3[ok]
        todo = todo[~ok]
    if boost:
        out *= stream.uniform(size) ** (1.0 / shape)
    return out


def sample(law: SwitchingLaw, stream: RngStream, size: Optional[int] = None):
    """Draw switching times ``tau > 0``; exact zeros are redrawn."""
    n = 1 if size is None else int(size)
    tau = _draw(law, stream, n)
    bad = np.flatnonzero(tau <= 0.0)
    while bad.size:
        tau[bad] = _draw(law, stream, bad.size)
        bad = bad[tau[bad] <= 0.0]
    return float(tau[0]) if size is None else tau


def _draw(law: SwitchingLaw, stream: RngStream, n: int) -> np.ndarray:
    if law.kind == "exp":
        return stream.exponential(n) * law.theta
    return sample_gamma(stream, law.kappa, n) * law.theta


@dataclass(frozen=True)
class SwitchMesh:
    """Realised mesh ``t0 = T_0 < T_1 < ... < T_{N_T+1} = T``.

    ``steps`` holds the drawn increments ``dT_k = T_k - T_{k-1}`` (the last
    one truncated to ``T - T_{N_T}``). Keeping them avoids recovering very
    short steps by differencing rounded times, which can lose all
    precision or even return 0. When omitted they are ``diff(times)``.
    """

    times: np.ndarray
    steps: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        steps = np.diff(times) if self.steps is None else np.asarray(self.steps, dtype=float)
        if steps.shape != (times.size - 1,):
            raise ValueError("steps must have one entry per mesh interval")
        object.__setattr__(self, "steps", steps)

    @property
    def increments(self) -> np.ndarray:
        return self.steps

    @property
    def n_switch(self) -> int:
        return self.times.size - 2


def mesh_from_taus(taus, t0: float, T: float) -> SwitchMesh:
    """Build the truncated mesh ``T_{k+1} = min(T_k + tau_{k+1}, T)``.

    Stops at the first ``tau`` that reaches ``T``; extra values are ignored.
    Raises if the supplied ``taus`` never reach the horizon.
    """
    times, steps = [t0], []
    t = t0
    for tau in taus:
        tau = float(tau)
        if t + tau >= T:
            times.append(T)
            steps.append(T - t)
            return SwitchMesh(np.asarray(times), np.asarray(steps))
        t = t + tau
        times.append(t)
        steps.append(tau)
    raise ValueError("switching times do not reach the horizon")


def simulate_mesh(law: SwitchingLaw, t0: float, T: float, stream: RngStream) -> SwitchMesh:
    if not T > t0:
        raise ValueError(f"T={T} must exceed t0={t0}")
    times, steps = [t0], []
    t = t0
    while True:
        tau = sample(law, stream)
        if t + tau >= T:
            times.append(T)
            steps.append(T - t)
            return SwitchMesh(np.asarray(times), np.asarray(steps))
        t = t + tau
        times.append(t)
        steps.append(tau)


def count_switches(law: SwitchingLaw, horizon: float, n: int, stream: RngStream) -> np.ndarray:
    """Vectorised draw of ``n`` independent values of ``N_T``."""
    counts = np.zeros(n, dtype=np.int64)
    elapsed = np.zeros(n)
    live = np.arange(n)
    while live.size:
        elapsed[live] += sample(law, stream, live.size)
        more = elapsed[live] < horizon
        live = live[more]
        counts[live] += 1
    return counts


def expected_switches(law: SwitchingLaw, horizon: float, tol: float = 1e-14) -> float:
    """Exact ``E[N_T]`` by the renewal identity ``sum_n P(tau_1 + ... + tau_n < T)``.

    A sum of ``n`` i.i.d. Gamma(kappa, theta) times is Gamma(n kappa, theta),
    so every term is a regularised lower incomplete gamma function.
    """
    if law.kind == "exp":
        return horizon / law.theta
    total, n = 0.0, 1
    while True:
        term = float(special.gammainc(n * law.kappa, horizon / law.theta))
        total += term
        if term < tol:
            return total
        n += 1


def validate_kappa(law: SwitchingLaw, model=None) -> Optional[str]:
    """Warn when the law lies outside the finite-variance regime.

    ``model`` supplies the declared time-Holder exponent ``alpha`` (1 when
    omitted). Returns the warning message, or ``None`` when
    ``kappa <= min(alpha, 1/2)``. Never raises.
    """
    alpha = 1.0 if model is None else float(getattr(model, "alpha", model))
    if law.kind == "exp":
        msg = (f"{law}: exponential switching gives a theoretical infinite "
               "variance for varying coefficients")
    elif law.kappa > min(alpha, 0.5):
        msg = (f"{law}: kappa > min(alpha, 1/2) = {min(alpha, 0.5):g}; "
               "finite variance is not guaranteed")
    else:
        return None
    warnings.warn(msg, FiniteVarianceWarning, stacklevel=2)
    return msg
