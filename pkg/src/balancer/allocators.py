"""Complete randomization (CR), rerandomization (RR) and CAM allocation.

CAM shuffles the units, puts the first two in arms 1 and 2, then walks the
remaining units in pairs. For each pair it evaluates the balance criterion
under both orientations and takes the better one with probability ``q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .balance import RESYNC_EVERY, _apply_pair, _branch_sqnorms, init_state, mahalanobis_from_whitened
from .errors import AcceptanceExhausted, InvalidInput
from .model import Allocation, CovarianceModel, UnitTable, whiten_array
from .theory import chi2_cdf, chi2_quantile

DEFAULT_Q = 0.75
DEFAULT_MAX_ITERS = 1_000_000


@dataclass(frozen=True)
class CamParams:
    q: float = DEFAULT_Q
    seed: int | None = None
    shuffle: bool = True

    def __post_init__(self):
        if not (0.5 < self.q < 1.0):
            raise InvalidInput(f"q must lie in (0.5, 1), got {self.q}")


@dataclass(frozen=True)
class RerandParams:
    """Acceptance rule ``M < threshold``.

    Give either ``threshold`` or ``acceptance`` (target probability p_a); the
    other is derived through the chi-square quantile map.
    """

    threshold: float | None = None
    acceptance: float | None = None
    max_iters: int = DEFAULT_MAX_ITERS
    seed: int | None = None

    def __post_init__(self):
        if (self.threshold is None) == (self.acceptance is None):
            raise InvalidInput("give exactly one of threshold or acceptance")
        if self.threshold is not None and not (self.threshold > 0):
            raise InvalidInput(f"threshold must be > 0, got {self.threshold}")
        if self.acceptance is not None and not (0.0 < self.acceptance < 1.0):
            raise InvalidInput(f"acceptance probability must lie in (0, 1), got {self.acceptance}")
        if self.max_iters < 1:
            raise InvalidInput("max_iters must be positive")

    def resolve_threshold(self, p: int) -> float:
        if self.threshold is not None:
            return float(self.threshold)
        return chi2_quantile(p, self.acceptance)

    def resolve_acceptance(self, p: int) -> float:
        if self.acceptance is not None:
            return float(self.acceptance)
        if math.isinf(self.threshold):
            return 1.0
        return float(chi2_cdf(p, self.threshold))


@dataclass(frozen=True)
class CamTrace:
    """Per-pair decisions; ``step`` i covers units 2i+1 and 2i+2 (1-based)."""

    step: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    branch: np.ndarray
    initial_m: float

    def __len__(self) -> int:
        return self.step.size

    def __iter__(self):
        for k in range(self.step.size):
            yield int(self.step[k]), float(self.m1[k]), float(self.m2[k]), int(self.branch[k])


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _balanced_arms(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n1 = n // 2
    if n % 2 and rng.random() < 0.5:
        n1 += 1
    arms = np.full(n, 2, dtype=np.int8)
    arms[order[:n1]] = 1
    return arms, order


def allocate_cr(table: UnitTable, seed=None, *, balanced: bool = True) -> Allocation:
    """Complete randomization.

    The default draws a uniformly random balanced split. ``balanced=False``
    flips an independent fair coin per unit instead (arm sizes then vary and
    an arm may even be empty).
    """
    n = table.n
    rng = _rng(seed)
    if balanced:
        arms, order = _balanced_arms(n, rng)
    else:
        arms = np.where(rng.random(n) < 0.5, 1, 2).astype(np.int8)
        order = np.arange(n)
    return Allocation(arms=arms, method="CR", params={"balanced": balanced}, seed=seed, order=order)


def allocate_rr(table: UnitTable, cov: CovarianceModel, params: RerandParams) -> tuple[Allocation, int]:
    """Rerandomization: redraw balanced CR splits until ``M < a``."""
    a = params.resolve_threshold(table.p)
    Z = whiten_array(table.X, cov)
    n = table.n
    rng = _rng(params.seed)
    best = math.inf
    for it in range(1, params.max_iters + 1):
        arms, order = _balanced_arms(n, rng)
        m = mahalanobis_from_whitened(Z, arms)
        if m < a:
            alloc = Allocation(
                arms=arms, method="RR",
                params={"threshold": a, "acceptance": params.resolve_acceptance(table.p),
                        "max_iters": params.max_iters},
                seed=params.seed, order=order,
            )
            return alloc, it
        best = min(best, m)
    raise AcceptanceExhausted(params.max_iters, best, a)


@njit(cache=True)
def _cam_sweep(Z, u, q, d, sum1, sum2):
    n_pairs = Z.shape[0] // 2 - 1
    m1s = np.empty(n_pairs)
    m2s = np.empty(n_pairs)
    branches = np.empty(n_pairs, dtype=np.int8)
    n_assigned = 2
    for k in range(n_pairs):
        a = 2 + 2 * k
        za = Z[a]
        zb = Z[a + 1]
        s1, s2 = _branch_sqnorms(d, za, zb)
        denom = float(n_assigned + 2)
        m1 = s1 / denom
        m2 = s2 / denom
        if m1 < m2:
            prob = q
        elif m1 > m2:
            prob = 1.0 - q
        else:
            prob = 0.5
        branch = 1 if u[k] < prob else 2
        _apply_pair(d, sum1, sum2, za, zb, branch, (k + 1) % RESYNC_EVERY == 0)
        n_assigned += 2
        m1s[k] = m1
        m2s[k] = m2
        branches[k] = branch
    return m1s, m2s, branches


def allocate_cam(table: UnitTable, cov: CovarianceModel, params: CamParams | None = None) -> tuple[Allocation, CamTrace]:
    """Covariate-adaptive allocation driven by the Mahalanobis criterion."""
    params = params or CamParams()
    n = table.n
    rng = _rng(params.seed)
    order = rng.permutation(n) if params.shuffle else np.arange(n)
    Z = np.ascontiguousarray(whiten_array(table.X, cov)[order])
    n_even = n - n % 2
    n_pairs = n_even // 2 - 1
    u = rng.random(n_pairs)

    state = init_state(Z[0], Z[1])
    d = state.diff_sum.copy()
    m1s, m2s, branches = _cam_sweep(Z[:n_even], u, float(params.q), d,
                                    state.sum_arm1.copy(), state.sum_arm2.copy())

    arms_seq = np.empty(n, dtype=np.int8)
    arms_seq[0], arms_seq[1] = 1, 2
    first = 2 + 2 * np.arange(n_pairs)
    arms_seq[first] = np.where(branches == 1, 1, 2)
    arms_seq[first + 1] = np.where(branches == 1, 2, 1)
    if n % 2:
        arms_seq[n - 1] = 1 if rng.random() < 0.5 else 2

    arms = np.empty(n, dtype=np.int8)
    arms[order] = arms_seq
    alloc = Allocation(
        arms=arms, method="CAM",
        params={"q": params.q, "shuffle": params.shuffle},
        seed=params.seed, order=order,
    )
    trace = CamTrace(step=np.arange(1, n_pairs + 1), m1=m1s, m2=m2s,
                     branch=branches, initial_m=state.m_current)
    return alloc, trace
