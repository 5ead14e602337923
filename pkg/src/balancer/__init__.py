"""Covariate-balanced treatment allocation: CAM, rerandomization and complete randomization."""

from .allocators import (CamParams, CamTrace, RerandParams, allocate_cam, allocate_cr,
                         allocate_rr)
from .balance import BalanceState, commit, init_state, mahalanobis, potential_m
from .errors import (AcceptanceExhausted, BalancerError, InsufficientData, InvalidInput, NoRoot,
                     SingularCovariance, SingularDesign)
from .inference import (EstimateReport, OutcomeModel, priv, r_squared, simulate_outcomes, tau_hat,
                        tau_tilde)
from .model import (Allocation, CovarianceModel, UnitTable, estimate_covariance, standardize,
                    unwhiten, whiten)
from .theory import TimeRatioParams, chi2_cdf, chi2_quantile, solve_a_star, time_ratio

__version__ = "0.1.0"

__all__ = [
    "AcceptanceExhausted", "Allocation", "BalanceState", "BalancerError", "CamParams", "CamTrace",
    "CovarianceModel", "EstimateReport", "InsufficientData", "InvalidInput", "NoRoot",
    "OutcomeModel", "RerandParams", "SingularCovariance", "SingularDesign", "TimeRatioParams",
    "UnitTable", "allocate_cam", "allocate_cr", "allocate_rr", "chi2_cdf", "chi2_quantile",
    "commit", "estimate_covariance", "init_state", "mahalanobis", "potential_m", "priv",
    "r_squared", "simulate_outcomes", "solve_a_star", "standardize", "tau_hat", "tau_tilde",
    "time_ratio", "unwhiten", "whiten",
]
