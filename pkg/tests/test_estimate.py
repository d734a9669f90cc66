import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bnnrobust.estimate import (ConfidenceInterval, EstimationConfig, EstimationError,
                                chernoff_bound, chernoff_n, clopper_pearson, massart_curve,
                                massart_n, sample_class, sequential_estimate)

THETA = GAMMA = 0.075
ALPHA = 0.05


class BernoulliStub:
    """Picklable trial returning i.i.d. Bernoulli(p) outcomes seeded by index."""

    def __init__(self, p, seed=0):
        self.p, self.seed = p, seed

    def __call__(self, index):
        return bool(np.random.default_rng([self.seed, index]).random() < self.p)


def test_chernoff_paper_anchor():
    assert chernoff_n(THETA, GAMMA) == 292


def test_chernoff_direct_formula():
    assert 50 * math.log(40) == pytest.approx(184.44, abs=0.01)
    assert chernoff_n(0.1, 0.05) == 185


def test_chernoff_theta_scaling():
    assert chernoff_bound(0.05, 0.1) == pytest.approx(4 * chernoff_bound(0.1, 0.1), rel=1e-14)


@pytest.mark.parametrize("theta,gamma", [(0.0, 0.1), (1.0, 0.1), (0.1, 0.0), (0.1, 1.5)])
def test_chernoff_rejects_bad_params(theta, gamma):
    with pytest.raises(ValueError):
        chernoff_n(theta, gamma)


def test_massart_paper_anchors():
    lower_case = ConfidenceInterval(0.0, 0.1, 0.95)
    upper_case = ConfidenceInterval(0.9, 1.0, 0.95)
    assert math.ceil(massart_n(THETA, GAMMA, ALPHA, lower_case)) == 171
    assert math.ceil(massart_n(THETA, GAMMA, ALPHA, upper_case)) == 181


def test_massart_straddling_case():
    factor = 2 / (9 * THETA ** 2) * math.log(2 / (GAMMA - ALPHA))
    assert factor == pytest.approx(173.1, abs=0.05)
    value = massart_n(THETA, GAMMA, ALPHA, ConfidenceInterval(0.4, 0.6, 0.95))
    assert value == pytest.approx(factor * 1.575 ** 2)
    assert math.ceil(value) == 430 > chernoff_n(THETA, GAMMA)


def test_massart_rejects_alpha_ge_gamma():
    with pytest.raises(ValueError):
        massart_n(0.1, 0.05, 0.05, ConfidenceInterval(0.0, 0.1, 0.95))


def test_massart_zero_width_monotone_towards_extremes():
    # the b < 1/2 term peaks at b = (1.5 - theta) / 3, just below 1/2
    peak = (1.5 - THETA) / 3
    lows = [massart_n(THETA, GAMMA, ALPHA, ConfidenceInterval(p, p, 0.95)) for p in np.linspace(peak, 0.0, 50)]
    highs = [massart_n(THETA, GAMMA, ALPHA, ConfidenceInterval(p, p, 0.95)) for p in np.linspace(0.51, 1.0, 50)]
    assert np.all(np.diff(lows) < 0) and np.all(np.diff(highs) < 0)


def test_min_never_exceeds_chernoff():
    c = chernoff_n(THETA, GAMMA)
    for e in np.linspace(0, 1, 201):
        assert math.ceil(min(massart_curve(THETA, GAMMA, ALPHA, e), chernoff_bound(THETA, GAMMA))) <= c


def test_crossover_near_paper_values():
    c = chernoff_bound(THETA, GAMMA)
    grid = np.linspace(0, 1, 10001)
    chern = np.array([math.ceil(min(massart_curve(THETA, GAMMA, ALPHA, e), c)) == 292 for e in grid])
    lo, hi = grid[chern].min(), grid[chern].max()
    assert chern[(grid >= lo) & (grid <= hi)].all()
    assert 0.22 < lo < 0.235 and 0.785 < hi < 0.80


def test_clopper_pearson_k0_closed_form():
    ci = clopper_pearson(0, 10, 0.05)
    assert ci.a == 0.0
    assert ci.b == pytest.approx(1 - 0.025 ** 0.1, abs=1e-9)
    assert ci.b == pytest.approx(0.30850, abs=1e-4)


def test_clopper_pearson_k_equals_n():
    ci = clopper_pearson(10, 10, 0.05)
    assert ci.b == 1.0
    assert ci.a == pytest.approx(0.025 ** 0.1, abs=1e-9)


@pytest.mark.parametrize("k,n", [(1, 10), (5, 10), (37, 120), (119, 120), (3, 292)])
def test_clopper_pearson_matches_beta_ppf(k, n):
    ci = clopper_pearson(k, n, 0.05)
    assert ci.a == pytest.approx(stats.beta.ppf(0.025, k, n - k + 1), abs=1e-9)
    assert ci.b == pytest.approx(stats.beta.ppf(0.975, k + 1, n - k), abs=1e-9)


@pytest.mark.parametrize("k,n", [(-1, 5), (6, 5), (0, 0)])
def test_clopper_pearson_invalid(k, n):
    with pytest.raises(ValueError):
        clopper_pearson(k, n, 0.05)


@pytest.mark.parametrize("p", [0.05, 0.5, 0.95])
def test_clopper_pearson_coverage(p):
    rng = np.random.default_rng(11)
    ks = rng.binomial(100, p, size=10_000)
    covered = 0
    for k in ks:
        ci = clopper_pearson(int(k), 100, 0.05)
        covered += ci.a <= p <= ci.b
    assert covered / len(ks) >= 0.95


def test_sample_class_degenerate():
    rng = np.random.default_rng(0)
    assert all(sample_class([1.0, 0.0], rng) == 0 for _ in range(1000))


def test_sample_class_fair_coin():
    rng = np.random.default_rng(1)
    freq = np.mean([sample_class([0.5, 0.5], rng) == 0 for _ in range(10_000)])
    assert 0.48 <= freq <= 0.52


def test_sample_class_relabeling():
    p = np.array([0.2, 0.5, 0.3])
    perm = [2, 0, 1]
    a = [sample_class(p, np.random.default_rng([4, i])) for i in range(2000)]
    b = [sample_class(p[perm], np.random.default_rng([4, i])) for i in range(2000)]
    fa = np.bincount(a, minlength=3) / 2000
    fb = np.bincount(b, minlength=3) / 2000
    np.testing.assert_allclose(fa[perm], fb, atol=0.04)


def test_sample_class_rejects_negative():
    with pytest.raises(ValueError):
        sample_class([1.2, -0.2], np.random.default_rng(0))


def _all_sat_fixed_point():
    # independent oracle: k = n, so the CP lower end is (alpha/2)^(1/n)
    c = math.log(2 / GAMMA) / (2 * THETA ** 2)
    factor = 2 / (9 * THETA ** 2) * math.log(2 / (GAMMA - ALPHA))
    for n in range(1, 1000):
        a = (ALPHA / 2) ** (1 / n)
        m = factor * ((3 * (1 - a) + THETA) * (3 * a + THETA) if a > 0.5 else (1.5 + THETA) ** 2)
        if n >= math.ceil(min(m, c)):
            return n


def test_all_sat_stub_stops_at_massart_fixed_point():
    n_expected = _all_sat_fixed_point()
    res = sequential_estimate(lambda i: True, EstimationConfig())
    assert res.p_hat == 1.0 and res.k == res.n
    assert res.n == n_expected
    assert res.n < 292
    assert res.terminating_bound == "Massart"


def test_bernoulli_half_stops_at_chernoff():
    res = sequential_estimate(BernoulliStub(0.5), EstimationConfig())
    assert res.n == 292
    assert res.terminating_bound == "Chernoff"


def test_all_unsat_stops_below_171():
    res = sequential_estimate(lambda i: False, EstimationConfig())
    assert res.p_hat == 0.0 and res.n <= 171


@pytest.mark.parametrize("outcome", [True, False])
def test_n_max_non_increasing_on_constant_streams(outcome):
    res = sequential_estimate(lambda i: outcome, EstimationConfig(), keep_log=True)
    n_max = [entry["n_max"] for entry in res.log]
    stable = [m for entry, m in zip(res.log, n_max) if entry["ci_b"] < 0.5 or entry["ci_a"] > 0.5]
    assert np.all(np.diff(stable) <= 0)


def test_p_hat_is_exact_ratio():
    res = sequential_estimate(BernoulliStub(0.3, seed=2), EstimationConfig())
    assert res.p_hat == res.k / res.n
    assert res.k <= res.n <= res.final_n_max + 1


def test_determinism_and_eta_verdict():
    cfg = EstimationConfig(eta=0.5, seed=3)
    a = sequential_estimate(BernoulliStub(0.2), cfg, keep_log=True)
    b = sequential_estimate(BernoulliStub(0.2), cfg, keep_log=True)
    assert a.to_dict() == b.to_dict()
    assert a.robust_verdict is True


def test_parallel_commit_order_matches_sequential():
    cfg = EstimationConfig()
    a = sequential_estimate(BernoulliStub(0.15, seed=9), cfg, keep_log=True)
    b = sequential_estimate(BernoulliStub(0.15, seed=9), cfg, keep_log=True, workers=2)
    assert a.to_dict() == b.to_dict()


def test_max_samples_cap_raises_with_partial():
    with pytest.raises(EstimationError) as err:
        sequential_estimate(BernoulliStub(0.5), EstimationConfig(max_samples=50))
    assert err.value.partial.n == 50


def test_config_validation():
    with pytest.raises(ValueError):
        EstimationConfig(alpha=0.1, gamma=0.075)
    with pytest.raises(ValueError):
        EstimationConfig(theta=0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_result_invariants(p, seed):
    res = sequential_estimate(BernoulliStub(p, seed), EstimationConfig())
    assert res.p_hat == res.k / res.n
    assert 0 <= res.ci.a <= res.ci.b <= 1
    assert res.final_n_max <= res.n_chernoff == 292
