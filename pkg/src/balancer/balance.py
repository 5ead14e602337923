"""Mahalanobis balance criterion: batch evaluation and incremental pair updates.

In whitened coordinates the criterion after ``n`` balanced assignments is
``M(n) = ||d||^2 / n`` with ``d`` the difference of arm sums. Assigning a
pair ``(a, b)`` moves ``d`` by ``+(z_a - z_b)`` (a to arm 1) or by
``-(z_a - z_b)`` (a to arm 2).

The numba helpers in this module are also used by the CAM kernel in
:mod:`balancer.allocators`, so replaying a CAM trace through
:func:`commit` reproduces the recorded values bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidInput
from .model import Allocation, CovarianceModel, UnitTable, whiten_array

# diff_sum is recomputed from the raw arm sums every RESYNC_EVERY commits.
RESYNC_EVERY = 1024


@njit(cache=True)
def _branch_sqnorms(d, za, zb):
    s1 = 0.0
    s2 = 0.0
    for j in range(d.shape[0]):
        delta = za[j] - zb[j]
        u = d[j] + delta
        v = d[j] - delta
        s1 += u * u
        s2 += v * v
    return s1, s2


@njit(cache=True)
def _sqnorm(d):
    s = 0.0
    for j in range(d.shape[0]):
        s += d[j] * d[j]
    return s


@njit(cache=True)
def _apply_pair(d, sum1, sum2, za, zb, branch, resync):
    """In-place update for branch 1 (a->arm 1) or 2 (a->arm 2)."""
    for j in range(d.shape[0]):
        delta = za[j] - zb[j]
        if branch == 1:
            d[j] += delta
            sum1[j] += za[j]
            sum2[j] += zb[j]
        else:
            d[j] -= delta
            sum1[j] += zb[j]
            sum2[j] += za[j]
    if resync:
        for j in range(d.shape[0]):
            d[j] = sum1[j] - sum2[j]


@dataclass(frozen=True)
class BalanceState:
    """Running balance of a pairwise allocation in whitened coordinates."""

    diff_sum: np.ndarray
    sum_arm1: np.ndarray
    sum_arm2: np.ndarray
    n_assigned: int
    count_arm1: int
    m_current: float
    commits: int = 0

    @property
    def p(self) -> int:
        return self.diff_sum.size


def init_state(z_arm1, z_arm2) -> BalanceState:
    """State after placing the first unit in arm 1 and the second in arm 2."""
    za = np.array(z_arm1, dtype=np.float64).ravel()
    zb = np.array(z_arm2, dtype=np.float64).ravel()
    if za.shape != zb.shape:
        raise InvalidInput("pair rows differ in length")
    d = za - zb
    return BalanceState(
        diff_sum=d, sum_arm1=za.copy(), sum_arm2=zb.copy(),
        n_assigned=2, count_arm1=1, m_current=_sqnorm(d) / 2.0,
    )


def potential_m(state: BalanceState, z_first, z_second) -> tuple[float, float]:
    """Criterion values for (first->arm 1, second->arm 2) and for the swap."""
    za = np.ascontiguousarray(z_first, dtype=np.float64).ravel()
    zb = np.ascontiguousarray(z_second, dtype=np.float64).ravel()
    s1, s2 = _branch_sqnorms(state.diff_sum, za, zb)
    denom = float(state.n_assigned + 2)
    return s1 / denom, s2 / denom


def commit(state: BalanceState, z_first, z_second, branch: int) -> BalanceState:
    """Return the state after assigning the pair according to ``branch``."""
    if branch not in (1, 2):
        raise InvalidInput(f"branch must be 1 or 2, got {branch!r}")
    za = np.ascontiguousarray(z_first, dtype=np.float64).ravel()
    zb = np.ascontiguousarray(z_second, dtype=np.float64).ravel()
    s1, s2 = _branch_sqnorms(state.diff_sum, za, zb)
    d = state.diff_sum.copy()
    sum1 = state.sum_arm1.copy()
    sum2 = state.sum_arm2.copy()
    commits = state.commits + 1
    _apply_pair(d, sum1, sum2, za, zb, branch, commits % RESYNC_EVERY == 0)
    n_new = state.n_assigned + 2
    return BalanceState(
        diff_sum=d, sum_arm1=sum1, sum_arm2=sum2,
        n_assigned=n_new, count_arm1=state.count_arm1 + 1,
        m_current=(s1 if branch == 1 else s2) / float(n_new),
        commits=commits,
    )


def mahalanobis_from_whitened(Z: np.ndarray, arms) -> float:
    """``n p_n (1 - p_n) ||zbar_1 - zbar_2||^2`` on already-whitened rows."""
    arms = np.asarray(arms)
    in1 = arms == 1
    n = arms.size
    n1 = int(np.count_nonzero(in1))
    n2 = n - n1
    if n1 == 0 or n2 == 0:
        raise InvalidInput("both arms must be nonempty")
    diff = Z[in1].mean(axis=0) - Z[~in1].mean(axis=0)
    return float(n1 * n2 / n * (diff @ diff))


def mahalanobis(table: UnitTable, cov: CovarianceModel, alloc: Allocation) -> float:
    """Batch Mahalanobis balance criterion for a complete allocation."""
    if alloc.n != table.n:
        raise InvalidInput(f"allocation covers {alloc.n} units, table has {table.n}")
    return mahalanobis_from_whitened(whiten_array(table.X, cov), alloc.arms)
