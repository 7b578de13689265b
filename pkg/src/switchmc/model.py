"""SDE model data and the built-in benchmark cases.

Coefficient functions are vectorised: ``drift(t, x)`` receives ``x`` of shape
``(n, d)`` and returns ``(n, d)``; ``sigma(t, x)`` returns ``(n, d, d)``.
``t`` is a scalar or an array of shape ``(n,)``. The helpers in this module
also accept a single state of shape ``(d,)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numerics import SingularMatrixError, lu_inverse

__all__ = [
    "CaseSpec",
    "ModelEvaluationError",
    "Payoff",
    "SdeModel",
    "SingularDiffusionError",
    "a_of",
    "builtin_case",
    "clamped_drift",
    "constant_model",
    "drift_of",
    "sigma_inv_of",
    "sigma_of",
    "BUILTIN_CASES",
]

Coefficient = Callable[[object, np.ndarray], np.ndarray]


class ModelEvaluationError(ValueError):
    """A coefficient function returned non-finite values."""


class SingularDiffusionError(ModelEvaluationError):
    """The diffusion matrix could not be inverted."""


@dataclass(frozen=True)
class SdeModel:
    """Coefficients and initial data of ``dX = b(t, X) dt + sigma(t, X) dW``."""

    d: int
    x0: np.ndarray
    T: float
    drift: Coefficient
    sigma: Coefficient
    t0: float = 0.0
    alpha: float = 1.0
    name: str = ""

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.d,):
            raise ValueError(f"x0 has shape {x0.shape}, expected ({self.d},)")
        object.__setattr__(self, "x0", x0)
        if not self.T > self.t0:
            raise ValueError(f"horizon T={self.T} must exceed t0={self.t0}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    @property
    def horizon(self) -> float:
        return self.T - self.t0


@dataclass(frozen=True)
class Payoff:
    """Terminal function ``g``; vectorised over a leading batch axis."""

    g: Callable[[np.ndarray], np.ndarray]
    smooth_c2: bool = False
    name: str = ""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.g(x[None, :])[0]
        return self.g(x)


@dataclass(frozen=True)
class CaseSpec:
    case_id: int
    model: SdeModel
    payoff: Payoff
    reference_value: Optional[float] = None
    description: str = field(default="", compare=False)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _checked(val: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(val)):
        raise ModelEvaluationError(f"{what} returned non-finite values")
    return val


def drift_of(model: SdeModel, t, x) -> np.ndarray:
    xb, single = _as_batch(x)
    b = _checked(np.asarray(model.drift(t, xb), dtype=float), "drift")
    b = b.reshape(xb.shape)
    return b[0] if single else b


def sigma_of(model: SdeModel, t, x) -> np.ndarray:
    xb, single = _as_batch(x)
    s = _checked(np.asarray(model.sigma(t, xb), dtype=float), "diffusion")
    s = s.reshape(xb.shape[0], model.d, model.d)
    return s[0] if single else s


def a_of(model: SdeModel, t, x) -> np.ndarray:
    """Return ``a = sigma sigma^T`` at ``(t, x)``."""
    s = sigma_of(model, t, x)
    return s @ np.swapaxes(s, -1, -2)


def sigma_inv_of(model: SdeModel, t, x) -> np.ndarray:
    s = sigma_of(model, t, x)
    try:
        return lu_inverse(s)
    except SingularMatrixError as exc:
        raise SingularDiffusionError(str(exc)) from exc


# -- built-in cases --------------------------------------------------------

def clamped_drift(t, x: np.ndarray) -> np.ndarray:
    """Componentwise ``b_i = clamp(1 - x_i, -10, 10)``."""
    return np.clip(1.0 - x, -10.0, 10.0)


def _scalar_sigma(fn):
    def sigma(t, x):
        return fn(x[:, 0])[:, None, None]

    return sigma


def _sigma_case12(x1):
    return 0.5 + 0.2 * np.minimum(x1 * x1, 1.0)


def _sigma_case3(x1):
    return 0.5 + 0.4 * np.minimum(x1 * x1, 1.0)


def _sigma_case4(x1):
    return np.minimum(np.maximum(0.5, x1 * x1), 1.0)


def _isotropic_sigma(level: float):
    def sigma(t, x):
        s = np.sum(x, axis=-1)
        val = 0.5 + level * np.minimum(s * s, 1.0)
        return val[:, None, None] * np.eye(x.shape[-1])

    return sigma


def _cos_payoff(x):
    return np.cos(x[:, 0])


def _call_payoff(x):
    return np.maximum(x[:, 0] - 1.0, 0.0)


def _basket_call_payoff(x):
    return np.maximum(np.mean(x, axis=-1) - 1.0, 0.0)


_CASE_TABLE = {
    1: (1, _scalar_sigma(_sigma_case12), _cos_payoff, True, None,
        "g = cos(x), sigma = 0.5 + 0.2 (x^2 ^ 1)"),
    2: (1, _scalar_sigma(_sigma_case12), _call_payoff, False, 0.17466,
        "g = (x - 1)+, sigma = 0.5 + 0.2 (x^2 ^ 1)"),
    3: (1, _scalar_sigma(_sigma_case3), _call_payoff, False, 0.21408,
        "g = (x - 1)+, sigma = 0.5 + 0.4 (x^2 ^ 1)"),
    4: (1, _scalar_sigma(_sigma_case4), _call_payoff, False, 0.2100,
        "g = (x - 1)+, sigma = (0.5 v x^2) ^ 1"),
    5: (4, _isotropic_sigma(0.4), _basket_call_payoff, False, 0.11806,
        "d = 4, g = (mean(x) - 1)+, sigma = [0.5 + 0.4 ((sum x)^2 ^ 1)] I"),
    6: (4, _isotropic_sigma(0.6), _basket_call_payoff, False, None,
        "d = 4, g = (mean(x) - 1)+, sigma = [0.5 + 0.6 ((sum x)^2 ^ 1)] I"),
}

BUILTIN_CASES = tuple(sorted(_CASE_TABLE))


def builtin_case(case_id: int) -> CaseSpec:
    """Return one of the six benchmark cases (x0 = 1, T = 1, clamped drift)."""
    try:
        d, sigma, g, smooth, ref, desc = _CASE_TABLE[int(case_id)]
    except (KeyError, ValueError, TypeError):
        raise ValueError(
            f"unknown case id {case_id!r}; expected one of {BUILTIN_CASES}"
        ) from None
    model = SdeModel(
        d=d, x0=np.ones(d), T=1.0, drift=clamped_drift, sigma=sigma,
        t0=0.0, alpha=1.0, name=f"case{case_id}",
    )
    payoff = Payoff(g=g, smooth_c2=smooth, name=g.__name__.strip("_"))
    return CaseSpec(case_id=int(case_id), model=model, payoff=payoff,
                    reference_value=ref, description=desc)


class _ConstantDrift:
    def __init__(self, b):
        self.b = np.asarray(b, dtype=float)

    def __call__(self, t, x):
        return np.broadcast_to(self.b, x.shape).copy()


class _ConstantSigma:
    def __init__(self, s):
        self.s = np.asarray(s, dtype=float)

    def __call__(self, t, x):
        d = self.s.shape[-1]
        return np.broadcast_to(self.s, (x.shape[0], d, d)).copy()


def constant_model(b, sigma, x0, T: float = 1.0, t0: float = 0.0) -> SdeModel:
    """Model with state-independent coefficients (closed-form moments)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    b = np.broadcast_to(np.asarray(b, dtype=float), (d,))
    s = np.asarray(sigma, dtype=float)
    s = s * np.eye(d) if s.ndim < 2 else s
    return SdeModel(d=d, x0=x0, T=T, drift=_ConstantDrift(b),
                    sigma=_ConstantSigma(s), t0=t0, alpha=1.0, name="constant")
