"""Regime-switching chain on a mesh and its Malliavin weights.

Conditionally on the mesh, the chain moves by exact Gaussian steps with
coefficients frozen at the left node:

    X_{k+1} = X_k + b(T_k, X_k) dT_{k+1} + sigma(T_k, X_k) dW_{k+1}.

The weight attached to node ``k + 1`` combines the first- and second-order
Malliavin weights of that step with the coefficient jumps at node ``k``:

    P_{k+1} = (M_{k+1} + V_{k+1} / 2) / f(dT_k).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO

import numpy as np

from .model import SdeModel, a_of, drift_of, sigma_inv_of, sigma_of
from .numerics import RngStream
from .switching import SwitchingLaw, SwitchMesh, density

__all__ = [
    "PathWeights",
    "SwitchPath",
    "dump_path",
    "first_weight",
    "malliavin_first",
    "malliavin_second",
    "path_weights",
    "second_weight",
    "simulate_path",
]


class ZeroIncrementError(ValueError):
    """A Malliavin weight was requested over a zero-length step."""


def first_weight(db, sinv, dW, dT):
    """``db . (sinv^T dW) / dT``, batched over leading axes."""
    dT = np.asarray(dT, dtype=float)
    z = np.einsum("...ji,...j->...i", sinv, dW)
    return np.einsum("...i,...i->...", db, z) / dT


def second_weight(da, sinv, dW, dT):
    """``da : sinv^T (dW dW^T - dT I) sinv / dT^2``, batched.

    Uses ``sinv^T sinv = a^{-1}`` so the bracket is ``z z^T - dT a^{-1}``
    with ``z = sinv^T dW``.
    """
    dT = np.asarray(dT, dtype=float)
    z = np.einsum("...ji,...j->...i", sinv, dW)
    quad = np.einsum("...i,...ij,...j->...", z, da, z)
    ainv = np.einsum("...ki,...kj->...ij", sinv, sinv)
    trace = np.einsum("...ij,...ij->...", da, ainv)
    return (quad - dT * trace) / (dT * dT)


def _check_dt(dT):
    if np.any(~(np.asarray(dT) > 0)):
        raise ZeroIncrementError("Malliavin weights need a positive time step")


def malliavin_first(model: SdeModel, t_prev, x_prev, t_cur, x_cur, dW_next, dT_next):
    """First-order weight ``M`` for the step leaving ``(t_cur, x_cur)``."""
    _check_dt(dT_next)
    db = drift_of(model, t_cur, x_cur) - drift_of(model, t_prev, x_prev)
    return first_weight(db, sigma_inv_of(model, t_cur, x_cur), np.asarray(dW_next, float), dT_next)


def malliavin_second(model: SdeModel, t_prev, x_prev, t_cur, x_cur, dW_next, dT_next):
    """Second-order weight ``V`` for the step leaving ``(t_cur, x_cur)``."""
    _check_dt(dT_next)
    da = a_of(model, t_cur, x_cur) - a_of(model, t_prev, x_prev)
    return second_weight(da, sigma_inv_of(model, t_cur, x_cur), np.asarray(dW_next, float), dT_next)


@dataclass(frozen=True)
class SwitchPath:
    """One realisation of the chain on a mesh.

    ``states[k]`` is ``X_k`` for ``k = 0..N_T+1`` and ``brownian[k - 1]`` is
    ``dW_k`` over ``[T_{k-1}, T_k]``. ``mirror_last`` is the antithetic
    terminal state obtained by flipping the sign of the final increment.
    """

    mesh: SwitchMesh
    states: np.ndarray
    brownian: np.ndarray
    mirror_last: np.ndarray

    @property
    def n_switch(self) -> int:
        return self.mesh.n_switch


@dataclass(frozen=True)
class PathWeights:
    """``M_k``, ``V_k``, ``P_k`` for ``k = 2..N_T+1`` (index 0 is ``k = 2``)."""

    M: np.ndarray
    V: np.ndarray
    P: np.ndarray


def simulate_path(model: SdeModel, mesh: SwitchMesh, stream: RngStream) -> SwitchPath:
    dts = mesh.increments
    n_steps = dts.size
    d = model.d
    states = np.empty((n_steps + 1, d))
    dW = np.sqrt(dts)[:, None] * stream.normal((n_steps, d))
    states[0] = model.x0
    for k in range(n_steps):
        t, x = mesh.times[k], states[k]
        states[k + 1] = x + drift_of(model, t, x) * dts[k] + sigma_of(model, t, x) @ dW[k]
    t, x = mesh.times[-2], states[-2]
    mirror = x + drift_of(model, t, x) * dts[-1] - sigma_of(model, t, x) @ dW[-1]
    return SwitchPath(mesh=mesh, states=states, brownian=dW, mirror_last=mirror)


def path_weights(model: SdeModel, law: SwitchingLaw, path: SwitchPath) -> PathWeights:
    """Weights ``P_2..P_{N_T+1}``; empty when ``N_T = 0``."""
    times, dts = path.mesh.times, path.mesh.increments
    n = path.n_switch
    if n < 1:
        empty = np.empty(0)
        return PathWeights(empty, empty, empty)
    # node k = 1..N_T pairs with node k-1 and the step k -> k+1
    t_prev, x_prev = times[:n], path.states[:n]
    t_cur, x_cur = times[1:n + 1], path.states[1:n + 1]
    dW = path.brownian[1:n + 1]
    dT = dts[1:n + 1]
    M = malliavin_first(model, t_prev, x_prev, t_cur, x_cur, dW, dT)
    V = malliavin_second(model, t_prev, x_prev, t_cur, x_cur, dW, dT)
    P = (M + 0.5 * V) / density(law, dts[:n])
    return PathWeights(M=np.atleast_1d(M), V=np.atleast_1d(V), P=np.atleast_1d(P))


def dump_path(path: SwitchPath, out: IO[str]) -> None:
    """Write ``k, T_k, X_k..., dW_k...`` per node, tab separated.

    ``dW_0`` is undefined and written as zeros.
    """
    d = path.states.shape[1]
    for k, (t, x) in enumerate(zip(path.mesh.times, path.states)):
        dw = path.brownian[k - 1] if k > 0 else np.zeros(d)
        fields = [str(k), repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in dw]
        out.write("\t".join(fields) + "\n")
