"""Unbiased regime-switching Monte Carlo estimators for SDE expectations.

The package estimates ``E[g(X_T)]`` for ``dX = b(t, X) dt + sigma(t, X) dW``
without discretisation bias: coefficients are frozen between random
switching times and the resulting error is corrected by Malliavin weights.
Three unbiased estimators are provided (plain, antithetic, and an
interacting-particle resampling scheme) together with a calibrated
Euler-Maruyama baseline.
"""

from .chain import PathWeights, SwitchPath, malliavin_first, malliavin_second, path_weights, simulate_path
from .estimators import (
    EstimateResult,
    EulerCalibration,
    EulerCalibrationConfig,
    antithetic_single,
    calibrate_euler,
    euler_estimate,
    plain_single,
    run_monte_carlo,
    switching_draws,
    switching_estimate,
)
from .model import CaseSpec, Payoff, SdeModel, a_of, builtin_case, constant_model, sigma_inv_of
from .numerics import RngStream, SingularMatrixError, gaussian_vector, lu_inverse
from .particles import PotentialParams, resampling_estimate, resampling_run
from .switching import (
    FiniteVarianceWarning,
    SwitchingLaw,
    SwitchMesh,
    density,
    exponential,
    gamma,
    sample,
    simulate_mesh,
    survival,
    validate_kappa,
)

__all__ = [
    "CaseSpec", "EstimateResult", "EulerCalibration", "EulerCalibrationConfig",
    "FiniteVarianceWarning", "PathWeights", "Payoff", "PotentialParams", "RngStream",
    "SdeModel", "SingularMatrixError", "SwitchMesh", "SwitchPath", "SwitchingLaw",
    "a_of", "antithetic_single", "builtin_case", "calibrate_euler", "constant_model",
    "density", "euler_estimate", "exponential", "gamma", "gaussian_vector", "lu_inverse",
    "malliavin_first", "malliavin_second", "path_weights", "plain_single",
    "resampling_estimate", "resampling_run", "run_monte_carlo", "sample", "sigma_inv_of",
    "simulate_mesh", "simulate_path", "survival", "switching_draws", "switching_estimate",
    "validate_kappa",
]

__version__ = "0.1.0"
