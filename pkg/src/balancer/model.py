"""Domain types, covariate preprocessing, covariance estimation and whitening.

All balance computations downstream run on whitened covariates
``z_i = L^T x_i`` where ``L L^T = (Sigma + lambda I)^{-1}`` and ``L`` is lower
triangular, so the Mahalanobis quadratic form reduces to a squared norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import linalg

from .errors import InvalidInput, SingularCovariance

# Smallest eigenvalue must be at least this fraction of the largest.
CONDITION_THRESHOLD = 1e-10
# Ridge candidates, as multiples of trace(Sigma) / p.
RIDGE_LADDER = (1e-8, 1e-6, 1e-4, 1e-2, 1.0)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class UnitTable:
    """Covariate matrix ``X`` (units x covariates) with unit identifiers."""

    ids: tuple
    X: np.ndarray
    zero_variance: tuple[bool, ...] = ()
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        if X.ndim != 2:
            raise InvalidInput(f"covariates must be a 2-d matrix, got shape {X.shape}")
        n, p = X.shape
        if n < 2 or p < 1:
            raise InvalidInput(f"need n >= 2 units and p >= 1 covariates, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidInput("covariates contain missing or non-finite entries")
        ids = tuple(self.ids) if self.ids is not None else ()
        if not ids:
            ids = tuple(str(i + 1) for i in range(n))
        if len(ids) != n:
            raise InvalidInput(f"{len(ids)} ids for {n} rows")
        columns = tuple(self.columns) or tuple(f"x{j + 1}" for j in range(p))
        if len(columns) != p:
            raise InvalidInput(f"{len(columns)} column names for {p} covariates")
        zv = tuple(bool(v) for v in self.zero_variance) or (False,) * p
        if len(zv) != p:
            raise InvalidInput("zero_variance flags must match the column count")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "zero_variance", zv)

    @classmethod
    def from_array(cls, X, ids: Sequence | None = None) -> "UnitTable":
        return cls(ids=tuple(ids) if ids is not None else (), X=np.asarray(X))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def replace_X(self, X: np.ndarray, **kw) -> "UnitTable":
        return UnitTable(ids=self.ids, X=X, columns=self.columns, **kw)

    def replicate(self, k: int) -> "UnitTable":
        """Stack ``k`` copies of the table; ids get a ``#copy`` suffix."""
        if k < 1:
            raise InvalidInput("replication factor must be >= 1")
        if k == 1:
            return self
        ids = tuple(f"{u}#{c + 1}" for c in range(k) for u in self.ids)
        return UnitTable(ids=ids, X=np.tile(self.X, (k, 1)), columns=self.columns)


@dataclass(frozen=True)
class CovarianceModel:
    """Covariance plus the lower-triangular factor of its (ridged) inverse."""

    sigma: np.ndarray
    precision_factor: np.ndarray
    regularization: float = 0.0
    source: str = "sample"

    @classmethod
    def known(cls, sigma) -> "CovarianceModel":
        """Build from a caller-supplied covariance (no ridge)."""
        sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
        _check_symmetric(sigma)
        return cls(
            sigma=_frozen(sigma.copy()),
            precision_factor=_frozen(_precision_factor(sigma)),
            regularization=0.0,
            source="known",
        )

    @property
    def p(self) -> int:
        return self.sigma.shape[0]

    def inverse(self) -> np.ndarray:
        L = self.precision_factor
        return L @ L.T


@dataclass(frozen=True)
class Allocation:
    """Arm assignment (1 or 2 per unit) with provenance.

    ``order[k]`` is the unit index allocated k-th. Arm 1 corresponds to
    ``T_i = 1`` and arm 2 to ``T_i = 0``.
    """

    arms: np.ndarray
    method: str
    params: dict = field(default_factory=dict)
    seed: int | None = None
    order: np.ndarray | None = None

    def __post_init__(self):
        arms = np.asarray(self.arms, dtype=np.int8).copy()
        if arms.ndim != 1 or not np.isin(arms, (1, 2)).all():
            raise InvalidInput("arms must be a vector of 1s and 2s")
        n = arms.size
        order = np.arange(n) if self.order is None else np.asarray(self.order, dtype=np.int64).copy()
        if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
            raise InvalidInput("order must be a permutation of the unit indices")
        object.__setattr__(self, "arms", _frozen(arms))
        object.__setattr__(self, "order", _frozen(order))

    @property
    def n(self) -> int:
        return self.arms.size

    @property
    def treatment(self) -> np.ndarray:
        """0/1 indicator ``T_i`` (1 for arm 1)."""
        return (self.arms == 1).astype(np.float64)

    def group_sizes(self) -> tuple[int, int]:
        n1 = int(np.count_nonzero(self.arms == 1))
        return n1, self.n - n1

    def order_index(self) -> np.ndarray:
        """1-based allocation position of each unit."""
        pos = np.empty(self.n, dtype=np.int64)
        pos[self.order] = np.arange(1, self.n + 1)
        return pos

    def describe(self) -> dict[str, Any]:
        n1, n2 = self.group_sizes()
        return {"method": self.method, "params": dict(self.params), "seed": self.seed,
                "n_arm1": n1, "n_arm2": n2}


def _check_symmetric(sigma: np.ndarray) -> None:
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise InvalidInput(f"covariance must be square, got {sigma.shape}")
    scale = max(float(np.max(np.abs(sigma))), 1e-300)
    if np.max(np.abs(sigma - sigma.T)) > 1e-12 * scale:
        raise InvalidInput("covariance is not symmetric")


def _precision_factor(sigma: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(sigma, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovariance(f"covariance is not positive definite: {exc}") from None
    inv = linalg.cho_solve(c, np.eye(sigma.shape[0]))
    inv = 0.5 * (inv + inv.T)
    try:
        return np.linalg.cholesky(inv)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"precision matrix factorization failed: {exc}") from None


def standardize(table: UnitTable) -> UnitTable:
    """Center every column and scale non-constant columns to unit variance.

    Constant columns come back as zeros and are flagged in ``zero_variance``.
    """
    X = table.X - table.X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    scale_tol = 1e-14 * np.maximum(np.abs(table.X).max(axis=0), 1.0)
    flat = sd <= scale_tol
    X[:, flat] = 0.0
    X[:, ~flat] /= sd[~flat]
    return UnitTable(ids=table.ids, X=X, columns=table.columns, zero_variance=tuple(flat))


def estimate_covariance(table: UnitTable, ridge_policy: str = "auto") -> CovarianceModel:
    """Sample covariance (divisor n-1) with minimal ridge repair.

    ``ridge_policy`` is ``"auto"`` (inflate the diagonal when the smallest
    eigenvalue falls below ``CONDITION_THRESHOLD`` times the largest) or
    ``"forbid"`` (raise :class:`SingularCovariance` instead).
    """
    if ridge_policy not in ("auto", "forbid"):
        raise InvalidInput(f"unknown ridge policy {ridge_policy!r}")
    X = table.X
    Xc = X - X.mean(axis=0)
    sigma = (Xc.T @ Xc) / (table.n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    p = table.p

    eig = np.linalg.eigvalsh(sigma)
    lam = 0.0
    if eig[0] < CONDITION_THRESHOLD * max(eig[-1], 0.0) or eig[-1] <= 0.0:
        if ridge_policy == "forbid":
            why = f"p={p} > n-1={table.n - 1}" if p > table.n - 1 else "rank-deficient covariates"
            raise SingularCovariance(f"sample covariance is singular ({why})")
        base = float(np.trace(sigma)) / p
        if base <= 0.0:
            base = 1.0
        for mult in RIDGE_LADDER:
            lam = mult * base
            lo, hi = eig[0] + lam, eig[-1] + lam
            if lo >= CONDITION_THRESHOLD * hi:
                break
    factor = _precision_factor(sigma + lam * np.eye(p))
    return CovarianceModel(
        sigma=_frozen(sigma), precision_factor=_frozen(factor), regularization=lam, source="sample"
    )


def whiten(table: UnitTable, cov: CovarianceModel) -> UnitTable:
    """Map covariates to canonical form ``z_i = L^T x_i``."""
    return table.replace_X(whiten_array(table.X, cov))


def whiten_array(X: np.ndarray, cov: CovarianceModel) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != cov.p:
        raise InvalidInput(f"covariate count {X.shape[-1]} does not match covariance dimension {cov.p}")
    return X @ cov.precision_factor


def unwhiten(table: UnitTable, cov: CovarianceModel) -> UnitTable:
    """Inverse of :func:`whiten`."""
    # x^T L = z^T  <=>  L^T x = z
    X = linalg.solve_triangular(cov.precision_factor, table.X.T, trans="T", lower=True).T
    return table.replace_X(X)
