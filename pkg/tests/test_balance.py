import numpy as np
import pytest

from balancer.balance import (RESYNC_EVERY, commit, init_state, mahalanobis, mahalanobis_from_whitened,
                              potential_m)
from balancer.errors import InvalidInput
from balancer.model import Allocation, CovarianceModel, UnitTable, estimate_covariance


def direct_m(X, arms, sigma):
    """Mahalanobis criterion straight from the definition, no whitening."""
    in1 = arms == 1
    n, n1 = arms.size, in1.sum()
    diff = X[in1].mean(axis=0) - X[~in1].mean(axis=0)
    return n1 * (n - n1) / n * diff @ np.linalg.solve(sigma, diff)


def test_hand_example_one_covariate():
    s = init_state([2.0], [-2.0])
    assert s.m_current == pytest.approx(8.0)
    m1, m2 = potential_m(s, [1.0], [-1.0])
    assert (m1, m2) == pytest.approx((9.0, 1.0))
    s2 = commit(s, [1.0], [-1.0], 2)
    assert s2.m_current == pytest.approx(1.0)
    assert s2.n_assigned == 4 and s2.count_arm1 == 2
    # the input state is untouched
    assert s.diff_sum[0] == 4.0


def test_zero_pair_rescales_by_n_over_n_plus_2():
    rng = np.random.default_rng(0)
    s = init_state(rng.standard_normal(3), rng.standard_normal(3))
    for _ in range(5):
        s = commit(s, rng.standard_normal(3), rng.standard_normal(3), 1)
    m1, m2 = potential_m(s, np.zeros(3), np.zeros(3))
    expect = s.m_current * s.n_assigned / (s.n_assigned + 2)
    assert m1 == pytest.approx(expect, rel=1e-12)
    assert m2 == pytest.approx(expect, rel=1e-12)


def test_commit_rejects_bad_branch():
    s = init_state([1.0], [0.0])
    with pytest.raises(InvalidInput):
        commit(s, [1.0], [2.0], 0)


@pytest.mark.parametrize("trace", range(100))
def test_incremental_matches_batch_every_step(trace):
    rng = np.random.default_rng(1000 + trace)
    p = int(rng.integers(1, 8))
    n_pairs = int(rng.integers(2, 40))
    Z = rng.standard_normal((2 * n_pairs, p)) * rng.uniform(0.1, 10.0)
    arms = np.zeros(2 * n_pairs, dtype=int)
    arms[0], arms[1] = 1, 2
    s = init_state(Z[0], Z[1])
    assert s.m_current == pytest.approx(mahalanobis_from_whitened(Z[:2], arms[:2]), rel=1e-8)
    for k in range(1, n_pairs):
        a, b = 2 * k, 2 * k + 1
        branch = int(rng.integers(1, 3))
        m1, m2 = potential_m(s, Z[a], Z[b])
        s = commit(s, Z[a], Z[b], branch)
        arms[a], arms[b] = (1, 2) if branch == 1 else (2, 1)
        batch = mahalanobis_from_whitened(Z[: b + 1], arms[: b + 1])
        assert s.m_current == pytest.approx(batch, rel=1e-8, abs=1e-12)
        assert (m1 if branch == 1 else m2) == s.m_current


def test_resync_keeps_long_runs_exact():
    rng = np.random.default_rng(3)
    n_pairs = 3 * RESYNC_EVERY
    Z = rng.standard_normal((2 * n_pairs, 2)) + 1e3
    s = init_state(Z[0], Z[1])
    arms = np.array([1, 2] * n_pairs)
    for k in range(1, n_pairs):
        s = commit(s, Z[2 * k], Z[2 * k + 1], 1)
    np.testing.assert_allclose(s.diff_sum, s.sum_arm1 - s.sum_arm2, rtol=1e-9)
    assert s.m_current == pytest.approx(mahalanobis_from_whitened(Z, arms), rel=1e-8)


def test_mahalanobis_matches_definition():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((50, 4)) @ rng.standard_normal((4, 4))
    arms = np.array([1] * 20 + [2] * 30)
    rng.shuffle(arms)
    t = UnitTable.from_array(X)
    cov = estimate_covariance(t)
    got = mahalanobis(t, cov, Allocation(arms=arms, method="x"))
    assert got == pytest.approx(direct_m(X, arms, np.cov(X, rowvar=False)), rel=1e-10)
    known = CovarianceModel.known(np.diag([1.0, 2.0, 3.0, 4.0]))
    got = mahalanobis(t, known, Allocation(arms=arms, method="x"))
    assert got == pytest.approx(direct_m(X, arms, np.diag([1.0, 2.0, 3.0, 4.0])), rel=1e-10)


def test_mahalanobis_needs_both_arms():
    with pytest.raises(InvalidInput):
        mahalanobis_from_whitened(np.ones((3, 1)), [1, 1, 1])
