"""Treatment-effect estimators, outcome simulation and variance diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .balance import mahalanobis
from .errors import InsufficientData, InvalidInput, SingularDesign
from .model import CONDITION_THRESHOLD, RIDGE_LADDER, Allocation, CovarianceModel, UnitTable
from .theory import chi2_cdf


@dataclass(frozen=True)
class OutcomeModel:
    """Linear outcome model ``y = mu1 T + mu2 (1 - T) + x^T beta + eps``.

    ``noise_law`` is ``"normal"`` (eps ~ N(0, noise_sd^2)) or ``"resample"``
    (eps drawn uniformly with replacement from ``residuals``). A length-1
    ``beta`` is broadcast to every covariate by :meth:`resolve`.
    """

    mu1: float
    mu2: float
    beta: np.ndarray
    noise_sd: float
    noise_law: str = "normal"
    residuals: np.ndarray | None = None

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64)).copy()
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        if not (self.noise_sd > 0):
            raise InvalidInput(f"noise_sd must be > 0, got {self.noise_sd}")
        if self.noise_law not in ("normal", "resample"):
            raise InvalidInput(f"unknown noise law {self.noise_law!r}")
        if self.noise_law == "resample":
            if self.residuals is None or np.size(self.residuals) == 0:
                raise InvalidInput("resample noise needs a residual pool")
            pool = np.asarray(self.residuals, dtype=np.float64).ravel().copy()
            pool.setflags(write=False)
            object.__setattr__(self, "residuals", pool)

    @property
    def tau(self) -> float:
        return self.mu1 - self.mu2

    def resolve(self, p: int) -> "OutcomeModel":
        if self.beta.size == p:
            return self
        if self.beta.size == 1:
            return OutcomeModel(self.mu1, self.mu2, np.full(p, self.beta[0]), self.noise_sd,
                                self.noise_law, self.residuals)
        raise InvalidInput(f"beta has {self.beta.size} entries for {p} covariates")


@dataclass(frozen=True)
class EstimateReport:
    tau_hat: float
    tau_tilde: float
    n: int
    p: int
    m_final: float
    r_squared: float
    applied_lambda: float

    def __post_init__(self):
        for name in ("tau_hat", "tau_tilde", "m_final", "r_squared", "applied_lambda"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidInput(f"{name} is not finite")
        if not (0.0 <= self.r_squared <= 1.0):
            raise InvalidInput("r_squared outside [0, 1]")


def _arms_of(alloc) -> np.ndarray:
    return alloc.arms if isinstance(alloc, Allocation) else np.asarray(alloc)


def simulate_outcomes(table: UnitTable, alloc: Allocation, model: OutcomeModel, seed=None) -> np.ndarray:
    arms = _arms_of(alloc)
    if arms.size != table.n:
        raise InvalidInput(f"allocation covers {arms.size} units, table has {table.n}")
    model = model.resolve(table.p)
    rng = np.random.default_rng(seed)
    t = (arms == 1).astype(np.float64)
    if model.noise_law == "normal":
        eps = rng.normal(0.0, model.noise_sd, size=table.n)
    else:
        eps = model.residuals[rng.integers(0, model.residuals.size, size=table.n)]
    return model.mu1 * t + model.mu2 * (1.0 - t) + table.X @ model.beta + eps


def _group_means(y: np.ndarray, arms: np.ndarray) -> tuple[float, float]:
    in1 = arms == 1
    if not in1.any() or in1.all():
        raise InvalidInput("both arms must be nonempty")
    return float(np.mean(y[in1])), float(np.mean(y[~in1]))


def tau_hat(y, alloc) -> float:
    """Difference of arm means."""
    y = np.asarray(y, dtype=np.float64)
    m1, m2 = _group_means(y, _arms_of(alloc))
    return m1 - m2


def design_matrix(alloc, table: UnitTable | None = None) -> np.ndarray:
    """``[T, 1 - T, X]`` with no intercept column."""
    arms = _arms_of(alloc)
    t = (arms == 1).astype(np.float64)
    cols = [t[:, None], (1.0 - t)[:, None]]
    if table is not None:
        cols.append(table.X)
    return np.hstack(cols)


def ols(design: np.ndarray, y: np.ndarray, ridge_policy: str = "auto") -> tuple[np.ndarray, float]:
    """Normal-equation least squares with one refinement step.

    Returns the coefficients and the ridge actually applied (0 unless the
    Gram matrix fails the conditioning test).
    """
    G = design.T @ design
    G = 0.5 * (G + G.T)
    k = G.shape[0]
    eig = np.linalg.eigvalsh(G)
    lam = 0.0
    if eig[0] < CONDITION_THRESHOLD * max(eig[-1], 0.0) or eig[-1] <= 0.0:
        if ridge_policy == "forbid":
            raise SingularDesign(f"design is rank-deficient (smallest Gram eigenvalue {eig[0]:.3g})")
        base = float(np.trace(G)) / k or 1.0
        for mult in RIDGE_LADDER:
            lam = mult * base
            if eig[0] + lam >= CONDITION_THRESHOLD * (eig[-1] + lam):
                break
        G = G + lam * np.eye(k)
    try:
        c = linalg.cho_factor(G)
    except linalg.LinAlgError:
        raise SingularDesign("Gram matrix is not positive definite") from None
    coef = linalg.cho_solve(c, design.T @ y)
    if lam == 0.0:
        coef = coef + linalg.cho_solve(c, design.T @ (y - design @ coef))
    return coef, lam


def tau_tilde(y, table: UnitTable | None, alloc, ridge_policy: str = "auto") -> tuple[float, np.ndarray]:
    """Covariate-adjusted effect ``mu1_hat - mu2_hat`` from OLS on ``[T, 1-T, X]``.

    With no covariates the OLS solution is the pair of arm means, computed
    directly so the result is identical to :func:`tau_hat`.
    """
    y = np.asarray(y, dtype=np.float64)
    arms = _arms_of(alloc)
    if arms.size != y.size:
        raise InvalidInput("outcome and allocation lengths differ")
    if table is None:
        m1, m2 = _group_means(y, arms)
        return m1 - m2, np.array([m1, m2])
    if not ((arms == 1).any() and (arms == 2).any()):
        raise SingularDesign("an arm is empty")
    coef, _ = ols(design_matrix(arms, table), y, ridge_policy)
    return float(coef[0] - coef[1]), coef


def r_squared(y, table: UnitTable, alloc) -> float:
    """Pooled within-arm squared multiple correlation of ``y`` on ``x``."""
    y = np.asarray(y, dtype=np.float64)
    arms = _arms_of(alloc)
    ssr = 0.0
    sst = 0.0
    for arm in (1, 2):
        sel = arms == arm
        m = int(np.count_nonzero(sel))
        if m <= table.p + 1:
            raise InsufficientData(f"arm {arm} has {m} units; need more than p+1 = {table.p + 1}")
        Xg = table.X[sel]
        yg = y[sel]
        A = np.hstack([np.ones((m, 1)), Xg - Xg.mean(axis=0)])
        coef, *_ = np.linalg.lstsq(A, yg, rcond=None)
        resid = yg - A @ coef
        ssr += float(resid @ resid)
        dev = yg - yg.mean()
        sst += float(dev @ dev)
    if sst == 0.0:
        return 0.0
    return float(min(1.0, max(0.0, 1.0 - ssr / sst)))


def priv(var_method: float, var_cr: float) -> float:
    """Percent reduction in variance relative to complete randomization."""
    if not (var_cr > 0):
        raise InvalidInput(f"reference variance must be > 0, got {var_cr}")
    return 100.0 * (var_cr - var_method) / var_cr


def population_r2(beta, sigma, noise_sd: float) -> float:
    """``b' S b / (b' S b + s^2)`` for a linear outcome with covariance ``S``."""
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    signal = float(beta @ sigma @ beta)
    return signal / (signal + noise_sd ** 2)


def rerandomization_variance_factor(p: int, threshold: float) -> float:
    """``v_a = P(chi2_{p+2} <= a) / P(chi2_p <= a)``.

    Share of each covariate's mean-difference variance left after keeping
    only draws with ``M < a``.
    """
    return float(chi2_cdf(p + 2, threshold)) / float(chi2_cdf(p, threshold))


def estimate_report(y, table: UnitTable, alloc: Allocation, cov: CovarianceModel) -> EstimateReport:
    th = tau_hat(y, alloc)
    tt, _ = tau_tilde(y, table, alloc)
    return EstimateReport(
        tau_hat=th, tau_tilde=tt, n=table.n, p=table.p,
        m_final=mahalanobis(table, cov, alloc),
        r_squared=r_squared(y, table, alloc),
        applied_lambda=cov.regularization,
    )
