import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gdfolio import finance as F
from gdfolio.errors import EvaluationError, ShapeError

returns = arrays(float, st.integers(2, 60), elements=st.floats(-0.2, 0.2, allow_nan=False))
weights = arrays(float, st.integers(1, 30), elements=st.floats(0, 1, allow_nan=False))
alphas = st.floats(0.01, 0.99)

R2 = np.array([0.01, 0.03])


def test_mean_variance_examples():
    assert F.mean_variance_objective(np.array([0.02, 0.02]), 1.0) == pytest.approx(-0.02, abs=1e-18)
    assert F.mean_variance_objective(R2, 0.0) == pytest.approx(-0.02, abs=1e-18)
    assert F.mean_variance_objective(R2, 100.0) == pytest.approx(-0.01, abs=1e-15)


def test_sharpe_examples():
    assert F.sharpe_ratio(R2) == pytest.approx(2.0, rel=1e-12)
    assert F.sharpe_ratio(R2, 0.02) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(EvaluationError, match="degenerate portfolio volatility"):
        F.sharpe_ratio(np.array([0.01, 0.01, 0.01]))


def test_var_examples():
    assert F.value_at_risk(np.array([-0.04, -0.01, 0.02, 0.03]), 0.25) == pytest.approx(0.0175, abs=1e-15)
    assert F.value_at_risk(np.full(5, 0.013), 0.05) == pytest.approx(-0.013, abs=1e-15)
    assert F.value_at_risk(np.array([-0.1, 0.1]), 0.5) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        F.value_at_risk(R2, 1.0)


def test_cvar_examples():
    assert F.cvar(np.array([-0.1, 0.1]), 0.5) == pytest.approx(0.1, abs=1e-15)
    assert F.cvar(np.full(7, 0.004), 0.05) == pytest.approx(-0.004, abs=1e-15)


def test_tracking_error_examples():
    rng = np.random.default_rng(0)
    I = rng.normal(0, 0.01, size=40)
    assert F.tracking_error(I, I) == 0.0
    assert F.tracking_error(I + 0.003, I) == pytest.approx(0.0, abs=1e-17)
    assert F.tracking_error(np.array([0.01, -0.01]), np.zeros(2)) == pytest.approx(0.01, abs=1e-17)
    with pytest.raises(ShapeError):
        F.tracking_error(np.zeros(3), np.zeros(4))


def test_constraint_te_examples():
    R = np.array([0.02, -0.02])  # TE 0.02 against a zero benchmark
    assert F.constraint_te(R, np.zeros(2), 0.004) == pytest.approx(0.016, abs=1e-15)
    assert F.constraint_te(R, np.zeros(2), 0.05) == 0.0
    with pytest.raises(ValueError):
        F.constraint_te(R, np.zeros(2), -1.0)


def test_ucits10_examples():
    assert F.constraint_ucits_10(np.array([0.15, 0.05, 0.80])) == pytest.approx(0.75, abs=1e-15)
    assert F.constraint_ucits_10(np.full(10, 0.1)) == 0.0
    assert F.constraint_ucits_10(np.eye(5)[2]) == pytest.approx(0.9, abs=1e-15)


def test_ucits540_examples():
    w = np.array([0.30, 0.20, 0.06, *[0.05] * 8, 0.04])
    assert F.constraint_ucits_5_40(w) == pytest.approx(0.16, abs=1e-12)
    assert F.constraint_ucits_5_40(np.full(20, 0.05)) == 0.0
    # exactly 0.05 is not above the lower limit
    assert F.ucits_masked_sum(np.array([0.05, 0.3, 0.65])) == pytest.approx(0.95)


def test_min_weight_examples():
    assert F.constraint_min_weight(np.array([0.005, 0.02, 0.975]), 0.01) == pytest.approx(0.005, abs=1e-18)
    assert F.constraint_min_weight(np.array([0.3, 0.7]), 0.01) == 0.0
    assert F.constraint_min_weight(np.array([0.0, 0.5, 0.5]), 0.01) == 0.0
    with pytest.raises(ValueError):
        F.constraint_min_weight(np.array([0.5, 0.5]), 0.0)


def _with_active(k, n=40):
    w = np.zeros(n)
    w[:k] = 1.0 / k
    return w


def test_count_range_examples():
    assert F.constraint_count_range(_with_active(23), 20, 30) == 0.0
    assert F.constraint_count_range(_with_active(35), 20, 30) == pytest.approx(75.0)
    assert F.constraint_count_range(_with_active(10), 20, 30) == pytest.approx(200.0)
    assert F.active_count(_with_active(17)) == 17.0
    with pytest.raises(ValueError):
        F.constraint_count_range(_with_active(3), 5, 4)


def test_group_mask_examples():
    rng = np.random.default_rng(1)
    w = rng.dirichlet(np.ones(6))
    everything = F.GroupMaskSet(np.ones((6, 1)), [1.0])
    assert F.constraint_group_mask(w, everything) == pytest.approx(0.0, abs=1e-15)
    nothing = F.GroupMaskSet(np.zeros((6, 1)), [0.3])
    assert F.constraint_group_mask(w, nothing) == pytest.approx(0.3, abs=1e-15)


def test_group_mask_validation():
    with pytest.raises(ShapeError):
        F.GroupMaskSet(np.ones((4, 2)), [0.5])
    with pytest.raises(ValueError):
        F.GroupMaskSet(np.full((4, 1), 0.5), [0.5])
    with pytest.raises(ValueError):
        F.GroupMaskSet(np.ones((4, 2)), [0.6, 0.6])
    with pytest.raises(ShapeError):
        F.constraint_group_mask(np.ones(3) / 3, F.GroupMaskSet(np.ones((4, 1)), [1.0]))
    with pytest.raises(KeyError):
        F.GroupMaskSet.from_members(["a", "b"], [["c"]], [0.5])
    g = F.GroupMaskSet.from_members(["a", "b", "c"], [["c", "a"], ["b"]], [0.5, 0.2])
    assert np.array_equal(g.matrix, [[1, 0], [0, 1], [1, 0]])


def test_volatility_examples():
    assert F.volatility(np.full(4, 0.02)) == pytest.approx(0.0, abs=1e-18)
    assert F.volatility(R2) == pytest.approx(0.01, abs=1e-17)
    rng = np.random.default_rng(2)
    R = rng.normal(size=30)
    assert F.volatility(-3.0 * R) == pytest.approx(3.0 * F.volatility(R), rel=1e-12)


def test_portfolio_returns_shape():
    r = np.arange(12.0).reshape(4, 3)
    assert np.array_equal(F.portfolio_returns(np.array([1.0, 0.0, 0.0]), r), r[:, 0])


@settings(max_examples=200, deadline=None)
@given(returns, alphas)
def test_cvar_at_least_var(R, alpha):
    assert F.cvar(R, alpha) >= F.value_at_risk(R, alpha) - 1e-15


@settings(max_examples=100, deadline=None)
@given(returns, st.floats(-0.1, 0.1))
def test_tracking_error_translation_invariant(R, c):
    I = np.sin(np.arange(R.size)) * 0.01
    assert F.tracking_error(R + c, I + c) == pytest.approx(F.tracking_error(R, I), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(returns, st.integers(2, 40))
def test_cvar_exact_rank_closed_form(R, T):
    # choose alpha so that alpha * (T - 1) is an integer rank j
    R = np.resize(R, T)
    for j in range(T - 1):
        alpha = j / (T - 1) if j else 0.5 / (T - 1)
        if not 0 < alpha < 1:
            continue
        s = np.sort(R)
        rank = alpha * (T - 1)
        lo = int(np.floor(rank))
        var = -(s[lo] + (rank - lo) * (s[min(lo + 1, T - 1)] - s[lo]))
        expected = var + np.sum(np.maximum(-s - var, 0.0)) / (alpha * T)
        assert F.cvar(R, alpha) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(weights, st.floats(0.05, 0.5), returns)
def test_penalties_nonnegative(w, m, R):
    I = np.cos(np.arange(R.size)) * 0.01
    assert F.constraint_ucits_10(w) >= 0
    assert F.constraint_ucits_5_40(w) >= 0
    assert F.constraint_min_weight(w, min(m, 0.99)) >= 0
    assert F.constraint_count_range(w, 2, 5) >= 0
    assert F.constraint_te(R, I, 0.004) >= 0
    M = (np.arange(w.size)[:, None] % 2 == np.arange(2)[None, :]).astype(float)
    assert F.constraint_group_mask(w, F.GroupMaskSet(M, [0.3, 0.2])) >= 0


def test_penalties_vanish_on_compliant_portfolios():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(12, 60))
        # ucits10: reject until every weight is at most 10%
        w = rng.dirichlet(np.full(n, 20.0))
        if w.max() <= 0.10:
            assert F.constraint_ucits_10(w) == 0.0
        # ucits 5/40: few large names, many small ones
        big = rng.uniform(0.051, 0.1, size=int(rng.integers(0, 5)))
        rest = 1.0 - big.sum()
        small = rng.dirichlet(np.ones(n)) * rest
        w = np.concatenate([big, small])
        if F.ucits_masked_sum(w) <= 0.40:
            assert F.constraint_ucits_5_40(w) == 0.0
        # minimum weight: active names hold at least m
        m = 0.01
        k = int(rng.integers(1, min(n, 99) + 1))
        w = np.zeros(n)
        idx = rng.choice(n, size=k, replace=False)
        w[idx] = m + rng.dirichlet(np.ones(k)) * (1.0 - k * m) if k * m < 1 else 1.0 / k
        assert F.constraint_min_weight(w, m) == 0.0
        # count range
        low, high = sorted(rng.integers(1, n + 1, size=2))
        k = int(rng.integers(low, high + 1))
        w = np.zeros(n)
        w[rng.choice(n, size=k, replace=False)] = rng.dirichlet(np.ones(k))
        assert F.constraint_count_range(w, int(low), int(high)) == 0.0
        # tracking error within the cap
        T = 50
        I = rng.normal(0, 0.01, size=T)
        noise = rng.normal(size=T)
        R = I + noise / noise.std() * rng.uniform(0, 0.004)
        assert F.constraint_te(R, I, 0.004 + 1e-15) == 0.0


def test_group_mask_vanishes_when_targets_met():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        n, m = 20, 4
        members = np.array_split(rng.permutation(n)[:16], m)
        targets = rng.dirichlet(np.ones(m)) * 0.9
        w = np.zeros(n)
        for j, g in enumerate(members):
            w[g] = rng.dirichlet(np.ones(g.size)) * targets[j]
        off = rng.permutation(n)[16:]
        w[np.setdiff1d(np.arange(n), np.concatenate(members))] = rng.dirichlet(np.ones(off.size)) * 0.1
        M = np.zeros((n, m))
        for j, g in enumerate(members):
            M[g, j] = 1.0
        assert F.constraint_group_mask(w, F.GroupMaskSet(M, targets)) <= 1e-15
