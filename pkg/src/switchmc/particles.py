"""Interacting-particle resampling estimator for the switching chain.

The expectation of a product of Malliavin weights is rewritten as a
product of expectations of non-negative potentials ``G_k``; a population
of path-valued particles is reweighted by ``G_k``, resampled and mutated
one switching step at a time. The final estimate

    gamma_n^N(phi_n) = eta_n^N(phi_n) * prod_{p=0}^{n-1} eta_p^N(G_p)

is unbiased for every population size ``N``.

Potential conventions
---------------------
For a node ``k`` of a particle path with ``dt_k = t_k - t_{k-1}``:

* ``G_0 = 1`` and ``G_1 = dt_1**rho * sqrt(c_1)`` (``|G_check_1| = 1``);
* ``G_k = |G_check_k| sqrt(c_k / c_{k-1}) (dt_k / dt_{k-1})**rho`` for
  ``k >= 2`` while the path is still below the horizon;
* ``G_k = 1`` from the absorbing node ``t_k = T`` onwards.

With ``H_{k+1} = 1 / (dt_k**rho sqrt(c_k))`` the product of ``G_k S_k``
telescopes back to the product of the weights ``P_k``.

The population is stored as a structure of arrays so that every step is a
batched numpy operation over all live particles.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .chain import first_weight, second_weight
from .estimators import TAG_RESAMPLE, EstimateResult, _coefficients, run_units
from .model import Payoff, SdeModel, a_of, drift_of, sigma_inv_of
from .numerics import RngStream
from .switching import SwitchingLaw, count_switches, density, sample, survival

__all__ = [
    "DegeneratePopulationError",
    "IterationDiagnostics",
    "Particle",
    "ParticleSystem",
    "PotentialParams",
    "beta_terminal",
    "c_factor",
    "default_n_iter",
    "g_check",
    "h_norm",
    "init_system",
    "ips_iteration",
    "multinomial_select",
    "path_potentials",
    "potential_G",
    "resampling_estimate",
    "resampling_run",
]


class DegeneratePopulationError(RuntimeError):
    """Every particle carries a zero potential; selection is undefined."""


@dataclass(frozen=True)
class PotentialParams:
    """Exponent ``rho`` of the potentials and the gamma switching parameters.

    ``rho`` must satisfy ``1/2 <= rho <= 1 - kappa``, which is only possible
    for ``kappa <= 1/2``.
    """

    rho: float
    kappa: float
    theta: float

    def __post_init__(self):
        if not (self.kappa > 0 and self.theta > 0):
            raise ValueError("kappa and theta must be positive")
        if not (0.5 - 1e-12 <= self.rho <= 1.0 - self.kappa + 1e-12):
            raise ValueError(
                f"rho={self.rho} outside [1/2, 1 - kappa] = [0.5, {1.0 - self.kappa:g}]"
                + ("; no admissible rho exists for kappa > 1/2" if self.kappa > 0.5 else "")
            )

    @classmethod
    def for_law(cls, law: SwitchingLaw, rho: Optional[float] = None) -> "PotentialParams":
        """Parameters matching ``law``; ``rho`` defaults to ``1 - kappa``."""
        return cls(rho=1.0 - law.kappa if rho is None else float(rho),
                   kappa=law.kappa, theta=law.theta)


# -- scalar building blocks --------------------------------------------------

def _inf_norm_vec(v):
    return np.max(np.abs(v), axis=-1)


def _inf_norm_mat(m):
    """Induced infinity norm (maximum absolute row sum)."""
    return np.max(np.sum(np.abs(m), axis=-1), axis=-1)


def _c_from_deltas(dt, db, da):
    return np.abs(dt) + _inf_norm_vec(db) ** 2 + _inf_norm_mat(da) ** 2


def c_factor(model: SdeModel, node_prev, node_cur, dt: Optional[float] = None) -> float:
    """``c_k = |dt_k| + ||db||^2 + ||da||^2`` between two chain nodes.

    Parameters
    ----------
    node_prev, node_cur : tuple
        ``(t, x)`` pairs for nodes ``k - 1`` and ``k``.
    dt : float, optional
        The step ``dt_k``; defaults to the difference of the node times.
    """
    (t0, x0), (t1, x1) = node_prev, node_cur
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    x1 = np.asarray(x1, dtype=float).reshape(-1)
    db = drift_of(model, t1, x1) - drift_of(model, t0, x0)
    da = a_of(model, t1, x1) - a_of(model, t0, x0)
    return float(_c_from_deltas(t1 - t0 if dt is None else dt, db, da))


def g_check(model: SdeModel, law: SwitchingLaw, nodes, dts=None, dW=None) -> float:
    """Signed potential ``G_check_k`` from the last three nodes of a path.

    Parameters
    ----------
    nodes : sequence of ``(t, x)``
        ``(node_{k-2}, node_{k-1}, node_k)``. Pass ``None`` entries (or a
        shorter sequence) for ``k < 2``, which returns 1.
    dts : pair of float, optional
        ``(dt_{k-1}, dt_k)``; defaults to differences of the node times.
    dW : array, optional
        The Brownian increment over ``[t_{k-1}, t_k]`` when it is known;
        by default it is reconstructed from the states.

    Notes
    -----
    The Brownian increment is reconstructed from the states,
    ``dW = sigma_{k-1}^{-1} (x_k - x_{k-1} - b_{k-1} dt_k)``, so the value
    coincides with the weight ``P_k`` of the path that produced the nodes.
    Returns 1 whenever ``dt_{k-1} dt_k = 0``.
    """
    nodes = [n for n in nodes if n is not None]
    if len(nodes) < 3:
        return 1.0
    (t2, x2), (t1, x1), (t0, x0) = nodes[-3], nodes[-2], nodes[-1]
    x2, x1, x0 = (np.asarray(v, dtype=float).reshape(-1) for v in (x2, x1, x0))
    dt_prev, dt_cur = (t1 - t2, t0 - t1) if dts is None else dts
    if not (dt_prev > 0 and dt_cur > 0):
        return 1.0
    b1 = drift_of(model, t1, x1)
    sinv = sigma_inv_of(model, t1, x1)
    if dW is None:
        dW = sinv @ (x0 - x1 - b1 * dt_cur)
    else:
        dW = np.asarray(dW, dtype=float).reshape(-1)
    db = b1 - drift_of(model, t2, x2)
    da = a_of(model, t1, x1) - a_of(model, t2, x2)
    M = first_weight(db, sinv, dW, dt_cur)
    V = second_weight(da, sinv, dW, dt_cur)
    return float((M + 0.5 * V) / density(law, dt_prev))


def potential_G(params: PotentialParams, g_check_val, c_cur, c_prev, dt_cur, dt_prev,
                k: Optional[int] = None):
    """Non-negative potential ``G_k``; vectorised over array inputs.

    ``k = 1`` (or ``c_prev``/``dt_prev`` given as ``None``) selects the first
    branch ``dt_1**rho sqrt(c_1)``. Entries with a non-positive time step
    fall in the degenerate branch and return 1.
    """
    rho = params.rho
    first = k == 1 or c_prev is None or dt_prev is None
    dt_cur = np.asarray(dt_cur, dtype=float)
    c_cur = np.asarray(c_cur, dtype=float)
    if first:
        ok = dt_cur > 0
        safe = np.where(ok, dt_cur, 1.0)
        out = np.where(ok, safe ** rho * np.sqrt(np.abs(c_cur)), 1.0)
    else:
        dt_prev = np.asarray(dt_prev, dtype=float)
        c_prev = np.asarray(c_prev, dtype=float)
        ok = (dt_cur > 0) & (dt_prev > 0) & (c_prev > 0)
        r_dt = np.where(ok, dt_cur, 1.0) / np.where(ok, dt_prev, 1.0)
        r_c = np.abs(c_cur) / np.where(ok, c_prev, 1.0)
        out = np.where(ok, np.abs(g_check_val) * np.sqrt(r_c) * r_dt ** rho, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def h_norm(params: PotentialParams, c_last, dt_last):
    """Normalisation ``H = 1 / (dt**rho sqrt(c))`` closing the telescoping product."""
    c_last = np.asarray(c_last, dtype=float)
    dt_last = np.asarray(dt_last, dtype=float)
    if np.any(~(dt_last > 0)) or np.any(~(c_last > 0)):
        raise ValueError("h_norm needs dt > 0 and c > 0")
    out = 1.0 / (dt_last ** params.rho * np.sqrt(c_last))
    return float(out) if out.ndim == 0 else out


def beta_terminal(model: SdeModel, payoff: Payoff, law: SwitchingLaw, nodes, dts=None) -> float:
    """Antithetic terminal functional ``beta_{q+1}`` from the final nodes.

    Parameters
    ----------
    nodes : sequence of ``(t, x)``
        ``(node_{q-1}, node_q, node_{q+1})`` with ``t_{q+1} = T``. For
        ``q = 0`` pass ``(None, node_0, node_1)`` (or just the last two);
        the value is then ``g(x_1) / (1 - F(dt_1))``.
    dts : pair of float, optional
        ``(dt_q, dt_{q+1})``; defaults to differences of the node times.
    """
    nodes = list(nodes)
    (t1, x1), (t0, x0) = nodes[-2], nodes[-1]
    x1 = np.asarray(x1, dtype=float).reshape(-1)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    dt_last = t0 - t1 if dts is None else dts[1]
    surv = survival(law, dt_last)
    g_end = float(payoff(x0))
    prev = nodes[-3] if len(nodes) >= 3 else None
    if prev is None:
        return g_end / surv
    t2, x2 = prev
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    b1 = drift_of(model, t1, x1)
    sinv = sigma_inv_of(model, t1, x1)
    mean_step = x1 + b1 * dt_last
    resid = x0 - mean_step  # = sigma_q dW
    dW = sinv @ resid
    x_hat = mean_step - resid
    M = float(first_weight(b1 - drift_of(model, t2, x2), sinv, dW, dt_last))
    V = float(second_weight(a_of(model, t1, x1) - a_of(model, t2, x2), sinv, dW, dt_last))
    g_mid = float(payoff(x1))
    g_hat = float(payoff(x_hat))
    f_prev = density(law, t1 - t2 if dts is None else dts[0])
    b1_ = (g_end - g_mid) * (M + 0.5 * V)
    b2_ = (g_hat - g_mid) * (0.5 * V - M)
    return 0.5 * (b1_ + b2_) / (surv * f_prev)


@dataclass(frozen=True)
class PathPotentials:
    """Potentials of one realised path, indexed by node ``k = 0..N_T``.

    ``G[k]`` and ``S[k]`` are ``G_k`` and ``S_k`` (``S_0 = S_1 = 1``) and
    ``H`` is ``H_{N_T+1}``; the absorbing node carries ``G = 1`` and is
    omitted. For ``N_T = 0`` the arrays hold the single entry ``G_0 = 1``
    and ``H = 1``.
    """

    G: np.ndarray
    S: np.ndarray
    H: float

    def product(self) -> float:
        """``H * prod_k G_k S_k``."""
        return self.H * math.prod((self.G * self.S).tolist())


def path_potentials(model: SdeModel, law: SwitchingLaw, params: PotentialParams,
                    path, reconstruct: bool = False) -> PathPotentials:
    """Evaluate ``G_k``, ``S_k`` and ``H`` along a :class:`~switchmc.chain.SwitchPath`.

    Only the node-level functions :func:`g_check`, :func:`c_factor`,
    :func:`potential_G` and :func:`h_norm` are used, so the result is an
    independent check of the identity ``prod_{k=2}^{N_T} P_k = H prod G_k S_k``.

    By default ``G_check`` uses the recorded Brownian increments. With
    ``reconstruct=True`` they are recovered from the states, as the
    particle system does; on extremely short steps that recovery is only
    accurate to ``~1e-16 |x| / |sigma dW|`` in relative terms.
    """
    times, states = path.mesh.times, path.states
    n = path.n_switch
    G = [1.0]
    S = [1.0]
    if n == 0:
        return PathPotentials(np.array(G), np.array(S), 1.0)
    nodes = [(float(times[k]), states[k]) for k in range(n + 1)]
    dt = [None] + [float(v) for v in path.mesh.increments[:n]]
    c = [None] + [c_factor(model, nodes[k - 1], nodes[k], dt[k]) for k in range(1, n + 1)]
    G.append(potential_G(params, 1.0, c[1], None, dt[1], None, k=1))
    S.append(1.0)
    for k in range(2, n + 1):
        gc = g_check(model, law, nodes[k - 2:k + 1], (dt[k - 1], dt[k]),
                     None if reconstruct else path.brownian[k - 1])
        G.append(potential_G(params, gc, c[k], c[k - 1], dt[k], dt[k - 1], k=k))
        S.append(1.0 if gc >= 0 else -1.0)
    return PathPotentials(np.array(G), np.array(S), h_norm(params, c[n], dt[n]))


# -- particle population -----------------------------------------------------

@dataclass(frozen=True)
class Particle:
    """Read-only view of one particle.

    ``state_prev2``, ``state_prev`` and ``state_cur`` are the three most
    recent ``(t, x)`` nodes (``None`` before they exist). ``terminal_value``
    is the cached ``beta H S`` payload, defined once ``absorbed``.
    """

    state_prev2: Optional[tuple]
    state_prev: Optional[tuple]
    state_cur: tuple
    sign_product: float
    c_prev: float
    absorbed: bool
    terminal_value: float


@dataclass(frozen=True)
class IterationDiagnostics:
    iteration: int
    absorbed_fraction: float
    mean_G: float
    effective_sample_size: float

    def line(self) -> str:
        return (f"iter={self.iteration} absorbed={self.absorbed_fraction:.4f} "
                f"mean_G={self.mean_G:.6g} ess={self.effective_sample_size:.1f}")


_ARRAY_FIELDS = ("t2", "x2", "t1", "x1", "t", "x", "b_prev", "a_prev", "b", "sig", "a", "sinv",
                 "dt", "dt_prev", "c", "sign", "G", "gprod", "absorbed", "terminal", "n_switch", "depth")


@dataclass
class ParticleSystem:
    """Structure-of-arrays particle population at iteration ``k``.

    Node ``k`` of particle ``i`` is ``(t[i], x[i])``; ``t1/x1`` and
    ``t2/x2`` hold nodes ``k-1`` and ``k-2`` (NaN when undefined). The
    coefficient caches ``b, sig, a, sinv`` refer to node ``k`` and
    ``b_prev, a_prev`` to node ``k-1``. ``G`` is the potential ``G_k``,
    ``c`` is ``c_k``, ``sign`` the running ``S_{1:k}``. ``depth`` is the
    node index of each particle's last node (frozen at ``N_T + 1`` once
    absorbed) and ``n_switch`` its ``N_T`` (-1 while live).
    """

    t2: np.ndarray
    x2: np.ndarray
    t1: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x: np.ndarray
    b_prev: np.ndarray
    a_prev: np.ndarray
    b: np.ndarray
    sig: np.ndarray
    a: np.ndarray
    sinv: np.ndarray
    dt: np.ndarray
    dt_prev: np.ndarray
    c: np.ndarray
    sign: np.ndarray
    G: np.ndarray
    gprod: np.ndarray
    absorbed: np.ndarray
    terminal: np.ndarray
    n_switch: np.ndarray
    depth: np.ndarray
    stream: RngStream
    iteration: int = 0
    potential_means: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.t.size

    @property
    def potential_mean_log_product(self) -> float:
        """``sum_p log eta_p^N(G_p)`` over the recorded iterations."""
        with np.errstate(divide="ignore"):
            return float(np.sum(np.log(self.potential_means))) if self.potential_means else 0.0

    @property
    def absorbed_fraction(self) -> float:
        return float(np.mean(self.absorbed))

    def particle(self, i: int) -> Particle:
        def node(t, x):
            return None if np.isnan(t[i]) else (float(t[i]), x[i].copy())

        return Particle(state_prev2=node(self.t2, self.x2), state_prev=node(self.t1, self.x1),
                        state_cur=(float(self.t[i]), self.x[i].copy()),
                        sign_product=float(self.sign[i]), c_prev=float(self.c[i]),
                        absorbed=bool(self.absorbed[i]), terminal_value=float(self.terminal[i]))

    def take(self, idx: np.ndarray) -> None:
        """Replace the population by the particles ``idx`` (selection)."""
        for name in _ARRAY_FIELDS:
            setattr(self, name, getattr(self, name)[idx])


def init_system(model: SdeModel, n: int, stream: RngStream) -> ParticleSystem:
    """``n`` copies of the initial node ``(t0, x0)`` (iteration 0, ``G_0 = 1``)."""
    if n < 1:
        raise ValueError("population size must be >= 1")
    d = model.d
    t = np.full(n, float(model.t0))
    x = np.broadcast_to(model.x0, (n, d)).copy()
    b, sig, a, sinv = _coefficients(model, t, x)
    nan = np.full(n, np.nan)
    return ParticleSystem(
        t2=nan.copy(), x2=np.full((n, d), np.nan), t1=nan.copy(), x1=np.full((n, d), np.nan),
        t=t, x=x, b_prev=np.zeros((n, d)), a_prev=np.zeros((n, d, d)), b=b, sig=sig, a=a,
        sinv=sinv, dt=np.zeros(n), dt_prev=np.zeros(n), c=np.zeros(n), sign=np.ones(n),
        G=np.ones(n), gprod=np.ones(n), absorbed=np.zeros(n, dtype=bool),
        terminal=np.zeros(n), n_switch=np.full(n, -1, dtype=np.int64),
        depth=np.zeros(n, dtype=np.int64), stream=stream,
    )


def _mutate(sys: ParticleSystem, model: SdeModel, payoff: Payoff, law: SwitchingLaw,
            params: PotentialParams, live: np.ndarray, first: bool) -> None:
    """Advance the particles ``live`` (all below the horizon) by one step.

    ``first`` marks the step from node 0 to node 1. New ``G``, sign and
    ``c`` are computed for particles that stay below ``T``; particles that
    reach ``T`` get their terminal payload ``beta H S gprod`` and ``G = 1``.
    """
    m = live.size
    if m == 0:
        return
    d, T = model.d, model.T
    stream = sys.stream
    t, x = sys.t[live], sys.x[live]
    b, sig, a, sinv = sys.b[live], sys.sig[live], sys.a[live], sys.sinv[live]
    tau = sample(law, stream, m)
    hit = t + tau >= T
    dt_new = np.where(hit, T - t, tau)
    dW = np.sqrt(dt_new)[:, None] * stream.normal((m, d))
    mean_step = x + b * dt_new[:, None]
    x_new = mean_step + np.einsum("nij,nj->ni", sig, dW)
    t_new = np.where(hit, T, t + tau)

    dt_old = sys.dt[live]
    if not first:
        # weight of the step leaving node k: reconstructed increment
        resid = x_new - mean_step
        dW_rec = np.einsum("nij,nj->ni", sinv, resid)
        M = first_weight(b - sys.b_prev[live], sinv, dW_rec, dt_new)
        V = second_weight(a - sys.a_prev[live], sinv, dW_rec, dt_new)
        gchk = (M + 0.5 * V) / density(law, dt_old)

    # absorbed now: node k+1 = T closes the path with N_T = k
    h = np.flatnonzero(hit)
    if h.size:
        hi = live[h]
        surv = survival(law, dt_new[h])
        g_end = payoff(x_new[h])
        if first:
            beta = g_end / surv
            H = np.ones(h.size)
        else:
            g_mid = payoff(x[h])
            g_hat = payoff(mean_step[h] - resid[h])
            half_v = 0.5 * V[h]
            beta = 0.5 * ((g_end - g_mid) * (M[h] + half_v)
                          + (g_hat - g_mid) * (half_v - M[h])) / (surv * density(law, dt_old[h]))
            H = h_norm(params, sys.c[hi], dt_old[h])
        sys.terminal[hi] = beta * H * sys.sign[hi] * sys.gprod[hi]
        sys.absorbed[hi] = True
        sys.n_switch[hi] = sys.depth[hi]
        sys.G[hi] = 1.0

    s = np.flatnonzero(~hit)
    si = live[s]
    # shift the node history for every mutated particle
    sys.t2[live], sys.x2[live] = sys.t1[live], sys.x1[live]
    sys.t1[live], sys.x1[live] = t, x
    sys.t[live], sys.x[live] = t_new, x_new
    sys.dt_prev[live] = dt_old
    sys.dt[live] = dt_new
    sys.depth[live] += 1
    if s.size:
        nb, nsig, na, nsinv = _coefficients(model, t_new[s], x_new[s])
        c_new = _c_from_deltas(dt_new[s], nb - b[s], na - a[s])
        if first:
            G_new = potential_G(params, 1.0, c_new, None, dt_new[s], None, k=1)
            S_new = np.ones(s.size)
        else:
            G_new = potential_G(params, gchk[s], c_new, sys.c[si], dt_new[s], dt_old[s])
            S_new = np.sign(gchk[s])
        sys.b_prev[si], sys.a_prev[si] = b[s], a[s]
        sys.b[si], sys.sig[si], sys.a[si], sys.sinv[si] = nb, nsig, na, nsinv
        sys.c[si] = c_new
        sys.G[si] = G_new
        sys.sign[si] = sys.sign[si] * S_new


def multinomial_select(weights: np.ndarray, stream: RngStream) -> np.ndarray:
    """Draw ``N`` i.i.d. indices with ``P(I = j) = w_j / sum(w)`` in O(N).

    Sorted uniforms are obtained as normalised partial sums of ``N + 1``
    standard exponentials and merged against the cumulative weights, so
    the returned indices are non-decreasing. Raises
    :class:`DegeneratePopulationError` when all weights vanish.
    """
    w = np.asarray(weights, dtype=float)
    n = w.size
    total = math.fsum(w)
    if not total > 0:
        raise DegeneratePopulationError("all potentials are zero; the population is degenerate")
    e = np.cumsum(stream.exponential(n + 1))
    u = e[:n] / e[n]
    cw = np.cumsum(w) / total
    idx = np.searchsorted(cw, u, side="right")
    return np.minimum(idx, n - 1)


def ips_iteration(sys: ParticleSystem, model: SdeModel, payoff: Payoff, law: SwitchingLaw,
                  params: PotentialParams) -> ParticleSystem:
    """Weight by ``G_k``, select, and mutate: iteration ``k -> k + 1``.

    Records ``eta_k^N(G_k)`` in ``sys.potential_means`` and one
    :class:`IterationDiagnostics` entry. Absorbed particles are carried
    along unchanged with ``G = 1``. The system is updated in place and
    returned.
    """
    G = sys.G
    total = math.fsum(G)
    if not total > 0:
        raise DegeneratePopulationError(
            f"all {sys.size} potentials vanish at iteration {sys.iteration}")
    mean_G = total / sys.size
    w = G / total
    sys.potential_means.append(mean_G)
    sys.diagnostics.append(IterationDiagnostics(
        iteration=sys.iteration, absorbed_fraction=sys.absorbed_fraction, mean_G=mean_G,
        effective_sample_size=float(1.0 / np.dot(w, w))))
    if sys.size > 1:
        sys.take(multinomial_select(G, sys.stream))
    live = np.flatnonzero(~sys.absorbed)
    _mutate(sys, model, payoff, law, params, live, first=sys.iteration == 0)
    sys.iteration += 1
    return sys


def _phi_values(sys: ParticleSystem, model: SdeModel, payoff: Payoff, law: SwitchingLaw,
                params: PotentialParams) -> np.ndarray:
    """``phi_n`` per particle: cached payload or one continuation to ``T``."""
    live = np.flatnonzero(~sys.absorbed)
    if live.size:
        sys.gprod[live] = sys.G[live]
        first = sys.iteration == 0
        while live.size:
            _mutate(sys, model, payoff, law, params, live, first=first)
            first = False
            live = live[~sys.absorbed[live]]
            sys.gprod[live] *= sys.G[live]
    return sys.terminal.copy()


def resampling_estimate(model: SdeModel, payoff: Payoff, law: SwitchingLaw,
                        params: PotentialParams, N: int, n_iter: int, stream: RngStream,
                        on_iteration: Optional[Callable[[IterationDiagnostics], None]] = None,
                        return_system: bool = False):
    """One draw of the particle estimator ``gamma_n^N(phi_n)``.

    Parameters
    ----------
    N : int
        Population size (``N = 1`` is legal but gives no interaction).
    n_iter : int
        Number ``n`` of weight/select/mutate iterations; the population
        starts at ``(t0, x0)`` with ``G_0 = 1``.
    on_iteration : callable, optional
        Receives the diagnostics of every iteration.

    Returns
    -------
    float
        ``mean(phi_n) * prod_{p<n} mean(G_p)``; 0 when the population
        degenerates (every potential zero), which is the exact value of the
        product in that event. With ``return_system=True`` the pair
        ``(value, system)`` is returned.
    """
    if N < 1 or n_iter < 1:
        raise ValueError("need N >= 1 and n_iter >= 1")
    sys = init_system(model, N, stream)
    try:
        for _ in range(n_iter):
            ips_iteration(sys, model, payoff, law, params)
            if on_iteration is not None:
                on_iteration(sys.diagnostics[-1])
    except DegeneratePopulationError:
        return (0.0, sys) if return_system else 0.0
    phi = _phi_values(sys, model, payoff, law, params)
    value = float(np.mean(phi)) * math.prod(sys.potential_means)
    return (value, sys) if return_system else value


def default_n_iter(law: SwitchingLaw, horizon: float, stream: RngStream,
                   n_mesh: int = 1000, level: float = 0.99) -> int:
    """Smallest ``n`` with ``P(N_T + 1 <= n) >= level`` on a mesh pre-pass.

    After ``n`` iterations a particle is absorbed exactly when its mesh
    has ``N_T + 1 <= n`` nodes past the origin.
    """
    steps = count_switches(law, horizon, n_mesh, stream) + 1
    return max(1, int(np.quantile(steps, level, method="inverted_cdf")))


def resampling_run(model: SdeModel, payoff: Payoff, law: SwitchingLaw,
                   params: PotentialParams, n_part: int, reps: int = 1, workers: int = 1,
                   seed: int = 0, n_iter: Optional[int] = None) -> EstimateResult:
    """Replicated particle estimate over ``workers`` independent systems.

    Each replication runs ``workers`` independent systems of
    ``N = n_part // workers`` particles and averages their estimates.
    Unlike the i.i.d. estimators, the worker count is part of the
    estimator definition (it fixes ``N``); it never changes how the random
    streams are assigned, so a fixed ``(seed, workers)`` is reproducible.
    """
    if n_part < 1 or reps < 1 or workers < 1:
        raise ValueError("n_part, reps and workers must be >= 1")
    N = n_part // workers
    if N < 1:
        raise ValueError(f"n_part={n_part} leaves no particle for each of {workers} workers")
    if n_iter is None:
        n_iter = default_n_iter(law, model.horizon, RngStream(seed, (TAG_RESAMPLE, 1 << 30)))

    def unit(j, stream):
        value, sys = resampling_estimate(model, payoff, law, params, N, n_iter, stream,
                                         return_system=True)
        done = sys.n_switch[sys.n_switch >= 0]
        return value, float(np.sum(done)), done.size

    start = time.perf_counter()
    per_rep = run_units(unit, workers, reps, workers, seed, TAG_RESAMPLE)
    wall = time.perf_counter() - start
    values = np.array([[u[0] for u in units] for units in per_rep])
    means = np.array([math.fsum(row) / workers for row in values])
    sw = math.fsum(u[1] for units in per_rep for u in units)
    cnt = sum(u[2] for units in per_rep for u in units)
    if reps > 1:
        rep_sd = float(np.std(means, ddof=1))
        se = rep_sd / math.sqrt(reps)
    elif workers > 1:
        se = float(np.std(values[0], ddof=1)) / math.sqrt(workers)
        rep_sd = se
    else:
        se = rep_sd = float("nan")
    return EstimateResult(mean=float(math.fsum(means) / reps), std_error=se,
                          replication_stdev=rep_sd, n_part=N * workers, reps=reps,
                          avg_switches=sw / cnt if cnt else float("nan"), wall_time_s=wall,
                          replicates=means)
