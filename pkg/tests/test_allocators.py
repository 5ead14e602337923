import itertools
import math
from collections import Counter

import numpy as np
import pytest

from balancer.allocators import CamParams, RerandParams, allocate_cam, allocate_cr, allocate_rr
from balancer.balance import commit, init_state, mahalanobis, mahalanobis_from_whitened, potential_m
from balancer.errors import AcceptanceExhausted, InvalidInput
from balancer.model import CovarianceModel, UnitTable, estimate_covariance, whiten_array
from balancer.theory import chi2_quantile


def _normal_table(n, p, seed):
    return UnitTable.from_array(np.random.default_rng(seed).standard_normal((n, p)))


def test_param_validation():
    for q in (0.5, 1.0, 0.2, 1.3):
        with pytest.raises(InvalidInput):
            CamParams(q=q)
    with pytest.raises(InvalidInput):
        RerandParams()
    with pytest.raises(InvalidInput):
        RerandParams(threshold=1.0, acceptance=0.5)
    with pytest.raises(InvalidInput):
        RerandParams(acceptance=1.0)
    assert RerandParams(acceptance=0.3).resolve_threshold(2) == pytest.approx(0.713350, abs=1e-6)
    assert RerandParams(threshold=0.713350).resolve_acceptance(2) == pytest.approx(0.3, abs=1e-6)


@pytest.mark.parametrize("n", range(2, 22))
def test_group_size_parity_all_allocators(n):
    table = _normal_table(n, 1, n)
    cov = estimate_covariance(table)
    allocs = [allocate_cr(table, seed=n), allocate_cam(table, cov, CamParams(seed=n))[0],
              allocate_rr(table, cov, RerandParams(threshold=1e9, seed=n))[0]]
    for alloc in allocs:
        n1, n2 = alloc.group_sizes()
        assert abs(n1 - n2) <= (n % 2)
        assert n1 + n2 == n


def test_odd_unit_goes_either_way():
    table = _normal_table(7, 2, 0)
    cov = estimate_covariance(table)
    sizes = {allocate_cam(table, cov, CamParams(seed=s))[0].group_sizes() for s in range(40)}
    assert sizes == {(3, 4), (4, 3)}
    sizes = {allocate_cr(table, seed=s).group_sizes() for s in range(40)}
    assert sizes == {(3, 4), (4, 3)}


def test_cr_n4_uniform_over_balanced_splits():
    table = _normal_table(4, 1, 0)
    reps = 12000
    counts = Counter(tuple(allocate_cr(table, seed=s).arms) for s in range(reps))
    assert len(counts) == 6
    se = math.sqrt((1 / 6) * (5 / 6) / reps)
    for c in counts.values():
        assert abs(c / reps - 1 / 6) < 3 * se


def test_cr_unbalanced_coin_mode():
    table = _normal_table(6, 1, 0)
    alloc = allocate_cr(table, seed=1, balanced=False)
    assert alloc.params == {"balanced": False}
    assert set(np.unique(alloc.arms)) <= {1, 2}


def test_rr_accepts_only_below_threshold_and_counts_iterations():
    table = _normal_table(200, 2, 4)
    cov = estimate_covariance(table)
    params = RerandParams(acceptance=0.5)
    a = params.resolve_threshold(2)
    iters = []
    for s in range(800):
        alloc, it = allocate_rr(table, cov, RerandParams(acceptance=0.5, seed=s))
        assert mahalanobis(table, cov, alloc) < a
        iters.append(it)
    # geometric with success probability close to 0.5
    assert abs(np.mean(iters) - 2.0) < 0.2


def test_rr_exhaustion_reports_best():
    table = _normal_table(20, 2, 0)
    cov = estimate_covariance(table)
    with pytest.raises(AcceptanceExhausted) as info:
        allocate_rr(table, cov, RerandParams(threshold=1e-12, max_iters=25, seed=0))
    assert info.value.iterations == 25
    assert info.value.best_m > 1e-12


def _brute_force_n4(x, q):
    """Exact distribution of CAM arm vectors for four units, sigma = 1."""
    dist = Counter()
    for perm in itertools.permutations(range(4)):
        a, b, c, d = perm
        outcomes = []
        for branch in (1, 2):
            arms = np.zeros(4, dtype=int)
            arms[a], arms[b] = 1, 2
            arms[c], arms[d] = (1, 2) if branch == 1 else (2, 1)
            diff = x[arms == 1].mean() - x[arms == 2].mean()
            outcomes.append((tuple(arms), 2 * 2 / 4 * diff ** 2))
        (arms1, m1), (arms2, m2) = outcomes
        p1 = q if m1 < m2 else (1 - q if m1 > m2 else 0.5)
        dist[arms1] += p1 / 24
        dist[arms2] += (1 - p1) / 24
    return dist


def test_cam_n4_matches_brute_force_enumeration():
    x = np.array([2.0, -2.0, 1.0, -1.0])
    table = UnitTable.from_array(x[:, None])
    cov = CovarianceModel.known([[1.0]])
    exact = _brute_force_n4(x, 0.75)
    assert sum(exact.values()) == pytest.approx(1.0)
    reps = 20000
    seen = Counter(tuple(allocate_cam(table, cov, CamParams(seed=s))[0].arms) for s in range(reps))
    assert set(seen) <= set(exact)
    for arms, prob in exact.items():
        se = math.sqrt(prob * (1 - prob) / reps)
        assert abs(seen[arms] / reps - prob) < 3 * se, (arms, prob, seen[arms] / reps)


def test_cam_takes_better_branch_with_probability_q():
    table = _normal_table(20000, 3, 2)
    cov = estimate_covariance(table)
    for q in (0.6, 0.75, 0.9):
        _, trace = allocate_cam(table, cov, CamParams(q=q, seed=5))
        decided = trace.m1 != trace.m2
        better = np.where(trace.m1 < trace.m2, 1, 2)
        hit = np.mean(trace.branch[decided] == better[decided])
        se = math.sqrt(q * (1 - q) / decided.sum())
        assert abs(hit - q) < 3 * se


def test_trace_replay_is_bit_exact():
    table = _normal_table(5001, 4, 9)
    cov = estimate_covariance(table)
    alloc, trace = allocate_cam(table, cov, CamParams(seed=17))
    Z = whiten_array(table.X, cov)[alloc.order]
    s = init_state(Z[0], Z[1])
    assert s.m_current == trace.initial_m
    for k, m1, m2, branch in trace:
        a = 2 * k
        got = potential_m(s, Z[a], Z[a + 1])
        assert got == (m1, m2)
        s = commit(s, Z[a], Z[a + 1], branch)
    arms_seq = alloc.arms[alloc.order]
    assert arms_seq[0] == 1 and arms_seq[1] == 2
    np.testing.assert_array_equal(arms_seq[2:-1:2], np.where(trace.branch == 1, 1, 2))
    assert s.m_current == pytest.approx(mahalanobis_from_whitened(Z[:-1], arms_seq[:-1]), rel=1e-8)


def test_no_shuffle_keeps_file_order():
    table = _normal_table(10, 2, 0)
    alloc, _ = allocate_cam(table, estimate_covariance(table), CamParams(seed=0, shuffle=False))
    np.testing.assert_array_equal(alloc.order, np.arange(10))
    assert alloc.arms[0] == 1 and alloc.arms[1] == 2


def test_seeded_runs_are_deterministic():
    table = _normal_table(101, 3, 1)
    cov = estimate_covariance(table)
    a1, t1 = allocate_cam(table, cov, CamParams(seed=123))
    a2, t2 = allocate_cam(table, cov, CamParams(seed=123))
    np.testing.assert_array_equal(a1.arms, a2.arms)
    np.testing.assert_array_equal(t1.m1, t2.m1)
    a3, _ = allocate_cam(table, cov, CamParams(seed=124))
    assert not np.array_equal(a1.arms, a3.arms)
    r1 = allocate_rr(table, cov, RerandParams(acceptance=0.2, seed=8))
    r2 = allocate_rr(table, cov, RerandParams(acceptance=0.2, seed=8))
    assert r1[1] == r2[1] and np.array_equal(r1[0].arms, r2[0].arms)


def test_cam_balances_better_than_cr():
    ms_cam, ms_cr = [], []
    for s in range(200):
        table = _normal_table(200, 4, 10_000 + s)
        cov = estimate_covariance(table)
        ms_cam.append(mahalanobis(table, cov, allocate_cam(table, cov, CamParams(seed=s))[0]))
        ms_cr.append(mahalanobis(table, cov, allocate_cr(table, seed=s)))
    assert np.mean(ms_cr) == pytest.approx(4.0, rel=0.2)
    assert np.mean(ms_cam) < 0.1 * np.mean(ms_cr)


def test_threshold_from_acceptance_is_chi2_quantile():
    table = _normal_table(50, 5, 0)
    alloc, _ = allocate_rr(table, estimate_covariance(table), RerandParams(acceptance=0.3, seed=1))
    assert alloc.params["threshold"] == chi2_quantile(5, 0.3)
