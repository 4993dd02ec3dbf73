import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policy_smoothing.certify import (OUTPUT_RESOLUTION, BoundInputs, certify_expected_reward,
                                      clopper_pearson_lower, clopper_pearson_upper, default_budget_grid,
                                      default_method, dkw_envelope, dkw_half_width, std_normal_cdf,
                                      std_normal_ppf, theorem1_lower, theorem1_upper)
from policy_smoothing.errors import BadConfig, EmptySamples, InvalidCounts, InvalidSigma, UnboundedReward

mpmath.mp.dps = 40


def mp_cdf(x):
    return 0.5 * mpmath.erfc(-mpmath.mpf(x) / mpmath.sqrt(2))


def mp_ppf(p):
    return -mpmath.sqrt(2) * mpmath.erfinv(1 - 2 * mpmath.mpf(p))


def mp_bound(p, k):
    return float(mp_cdf(mp_ppf(p) - k))


def mp_beta_quantile(q, a, b):
    lo, hi = mpmath.mpf(0), mpmath.mpf(1)
    for _ in range(200):
        mid = (lo + hi) / 2
        if mpmath.betainc(a, b, 0, mid, regularized=True) < q:
            lo = mid
        else:
            hi = mid
    return float((lo + hi) / 2)


def test_normal_cdf_and_ppf_against_erf_oracle():
    xs = np.linspace(-8, 8, 161)
    got = std_normal_cdf(xs)
    want = np.array([float(mp_cdf(x)) for x in xs])
    assert np.max(np.abs(got - want)) <= 1e-12
    ps = np.concatenate([np.linspace(1e-6, 1 - 1e-6, 101), [1e-12, 1 - 1e-12]])
    got = std_normal_ppf(ps)
    want = np.array([float(mp_ppf(p)) for p in ps])
    assert np.max(np.abs(got - want) / np.maximum(1, np.abs(want))) <= 1e-12


def test_bound_reference_values():
    assert theorem1_lower(0.5, 1.0, 1.0) == pytest.approx(0.158655, abs=5e-7)
    assert theorem1_upper(0.5, 0.3, 0.3) == pytest.approx(0.841345, abs=5e-7)
    assert theorem1_lower(0.5, 0.2, 0.2) == pytest.approx(mp_bound(0.5, 1), abs=1e-14)
    # Phi^-1(0.975) = 1.959964 lands exactly on the median; 0.975002 sits 3.4e-5 further out
    assert theorem1_lower(0.975, float(mp_ppf(0.975)), 1.0) == pytest.approx(0.5, abs=1e-12)
    got = theorem1_lower(0.975002, 1.959964, 1.0)
    assert got == pytest.approx(mp_bound(0.975002, 1.959964), abs=1e-13)
    assert got == pytest.approx(0.5, abs=2e-5)


def test_bound_against_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = rng.uniform(1e-6, 1 - 1e-6)
        b, s = rng.uniform(0, 2), rng.uniform(0.05, 1)
        assert theorem1_lower(p, b, s) == pytest.approx(mp_bound(p, b / s), abs=1e-12)
        assert theorem1_upper(p, b, s) == pytest.approx(mp_bound(p, -b / s), abs=1e-12)


def test_bound_edges_and_errors():
    assert theorem1_lower(0.0, 1.0, 0.5) == 0.0 and theorem1_lower(1.0, 1.0, 0.5) == 1.0
    assert theorem1_upper(0.0, 1.0, 0.5) == 0.0 and theorem1_upper(1.0, 1.0, 0.5) == 1.0
    with pytest.raises(InvalidSigma):
        theorem1_lower(0.5, 1.0, 0.0)
    with pytest.raises(InvalidSigma):
        theorem1_upper(0.5, 1.0, -1.0)
    v = theorem1_lower(np.array([0.2, 0.5, 0.9]), 0.1, 0.2)
    assert v.shape == (3,) and np.all(np.diff(v) > 0)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-9, 1 - 1e-9), st.floats(0, 5), st.floats(0.01, 3))
def test_bound_properties(p, b, s):
    lo, hi = theorem1_lower(p, b, s), theorem1_upper(p, b, s)
    assert 0.0 <= lo <= p + 1e-12 and p - 1e-12 <= hi <= 1.0 and lo <= hi
    assert theorem1_lower(p, b + 0.1, s) <= lo + 1e-15


def test_clopper_pearson_reference_values():
    assert clopper_pearson_lower(100, 100, 0.05) == pytest.approx(0.05 ** (1 / 100), abs=1e-12)
    assert clopper_pearson_lower(100, 100, 0.05) == pytest.approx(0.970487, abs=5e-7)
    assert clopper_pearson_lower(0, 50, 0.05) == 0.0
    want = mp_beta_quantile(0.05, 9900, 101)
    assert clopper_pearson_lower(9900, 10000, 0.05) == pytest.approx(want, abs=1e-12)
    assert clopper_pearson_upper(0, 100, 0.05) == pytest.approx(1 - 0.05 ** (1 / 100), abs=1e-12)
    assert clopper_pearson_upper(7, 7, 0.05) == 1.0


def test_clopper_pearson_errors():
    with pytest.raises(InvalidCounts):
        clopper_pearson_lower(5, 4, 0.05)
    with pytest.raises(InvalidCounts):
        clopper_pearson_lower(-1, 4, 0.05)
    with pytest.raises(InvalidCounts):
        clopper_pearson_lower(0, 0, 0.05)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.data())
def test_clopper_pearson_properties(n, data):
    k = data.draw(st.integers(0, n))
    lo = clopper_pearson_lower(k, n, 0.05)
    assert 0.0 <= lo <= k / n + 1e-12
    assert lo <= clopper_pearson_upper(k, n, 0.05)
    if k < n:
        assert lo <= clopper_pearson_lower(k + 1, n, 0.05)


def test_dkw_half_width_values():
    assert dkw_half_width(10_000, 0.05) == pytest.approx(math.sqrt(math.log(40) / 20000))
    assert round(dkw_half_width(10_000, 0.05), 6) == 0.013581
    w = [dkw_half_width(m, 0.05) for m in (100, 10_000, 1_000_000)]
    assert w[0] / w[1] == pytest.approx(10) and w[1] / w[2] == pytest.approx(10)


def test_dkw_envelope_step_functions():
    env = dkw_envelope([3.0] * 50, 0.05)
    assert env.empirical_cdf(2.999) == 0.0 and env.empirical_cdf(3.0) == 1.0
    env = dkw_envelope([1, 2, 2, 4], 0.2)
    x = np.array([0, 1, 1.5, 2, 3, 4, 5])
    np.testing.assert_allclose(env.empirical_cdf(x), [0, 0.25, 0.25, 0.75, 0.75, 1, 1])
    assert np.all(env.lower(x) <= env.empirical_cdf(x)) and np.all(env.empirical_cdf(x) <= env.upper(x))
    assert np.all(np.diff(env.upper(x)) >= 0) and np.all((env.upper(x) >= 0) & (env.upper(x) <= 1))
    with pytest.raises(EmptySamples):
        dkw_envelope([], 0.05)


def test_clopper_pearson_coverage():
    rng = np.random.default_rng(0)
    for p in (0.3, 0.9, 0.99):
        k = rng.binomial(500, p, size=1000)
        covered = np.mean(clopper_pearson_lower(k, 500, 0.05) <= p)
        assert covered >= 0.94


def test_dkw_coverage():
    from scipy import stats
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(1000):
        x = np.sort(rng.exponential(size=300))
        env = dkw_envelope(x, 0.05)
        f = stats.expon.cdf(x)
        # the true CDF is continuous: check both sides of every jump
        ok = np.all(env.lower(x) <= f + 1e-15) and np.all(f <= env.upper(x))
        left = np.concatenate([[0.0], env.upper_values[:-1]])
        ok = ok and np.all(f <= np.maximum(left, env.half_width) + 1e-15)
        hits += ok
    assert hits / 1000 >= 0.94


def test_bernoulli_and_per_threshold_agree_on_binary_data():
    rng = np.random.default_rng(2)
    for p in (0.2, 0.6, 0.97):
        x = (rng.random(800) < p).astype(float)
        inp = BoundInputs(x, 0.05, 0.3, [0.0, 0.1, 0.3, 0.9])
        a = certify_expected_reward(inp, "BernoulliCP", 0.0, 1.0)
        b = certify_expected_reward(inp, "PerThresholdCP", 0.0, 1.0)
        assert np.array_equal(a.lower_bounds, b.lower_bounds)
        k = int(x.sum())
        want = theorem1_lower(clopper_pearson_lower(k, 800, 0.05), 0.3, 0.3)
        assert a.bound_at(0.3) == pytest.approx(want, abs=2 * OUTPUT_RESOLUTION)


def test_per_threshold_uses_bonferroni_split():
    x = np.array([0, 1, 2, 2, 2, 1, 2, 2], dtype=float)
    cert = certify_expected_reward(BoundInputs(x, 0.1, 0.5, [0.0, 0.4]), "PerThresholdCP", 0.0, 2.0)
    for b in (0.0, 0.4):
        want = sum(theorem1_lower(clopper_pearson_lower(int(np.sum(x >= t)), 8, 0.05), b, 0.5) for t in (1, 2))
        assert cert.bound_at(b) == pytest.approx(want, abs=2 * OUTPUT_RESOLUTION)


def test_cdf_dkw_integral_by_hand():
    x = np.array([1.0, 3.0, 3.0, 4.0])
    a = 0.5
    eps = math.sqrt(math.log(2 / a) / 8)
    cert = certify_expected_reward(BoundInputs(x, a, 1.0, [0.0, 0.5]), "CdfDkw", 0.0, 5.0)
    for b in (0.0, 0.5):
        ceil = lambda f: min(1.0, theorem1_upper(min(1.0, f + eps), b, 1.0))
        # pieces [0,1), [1,3), [3,4), [4,5) with empirical CDF 0, .25, .75, 1 at their left ends
        want = sum(w * (1 - ceil(f)) for w, f in ((1, 0.0), (2, 0.25), (1, 0.75), (1, 1.0)))
        assert cert.bound_at(b) == pytest.approx(max(want, 0.0), abs=2 * OUTPUT_RESOLUTION)


def test_degenerate_rewards_converge():
    for m in (100, 10_000, 1_000_000):
        cert = certify_expected_reward(BoundInputs(np.full(m, 7.0), 0.05, 1.0), "CdfDkw", 0.0, 10.0)
        assert cert.lower_bounds[0] == pytest.approx(7.0 * (1 - dkw_half_width(m, 0.05)), abs=1e-9)


def test_certificate_invariants_on_resampled_data():
    rng = np.random.default_rng(3)
    budgets = default_budget_grid(0.2)
    for _ in range(100):
        x = np.minimum(rng.geometric(0.02, size=400), 200).astype(float)
        for method in ("CdfDkw", "PerThresholdCP"):
            c = certify_expected_reward(BoundInputs(x, 0.05, 0.2, budgets), method, 0.0, 200.0)
            assert np.all(np.diff(c.lower_bounds) <= 0)
            assert c.lower_bounds[0] <= x.mean() and np.all(c.lower_bounds >= 0.0)


def test_certificate_grows_with_samples():
    rng = np.random.default_rng(4)
    means = []
    for m in (100, 1000, 10_000):
        vals = [certify_expected_reward(BoundInputs(rng.integers(150, 201, size=m).astype(float), 0.05, 0.2,
                                                    [0.1]), "PerThresholdCP", 0, 200).lower_bounds[0]
                for _ in range(10)]
        means.append(np.mean(vals))
    assert means[0] < means[1] < means[2]


def test_envelope_sandwich():
    rng = np.random.default_rng(5)
    x = rng.integers(0, 50, size=500).astype(float)
    env = dkw_envelope(x, 0.05)
    c = certify_expected_reward(BoundInputs(x, 0.05, 0.5, [0.0, 0.3, 1.0]), "CdfDkw", 0.0, 50.0)
    lower_at = np.concatenate([[float(env.lower(0.0))], env.lower_values])
    for up in c.envelope_upper:
        assert np.all(lower_at <= up + 1e-15)


def test_input_validation():
    with pytest.raises(EmptySamples):
        BoundInputs([], 0.05, 0.2)
    with pytest.raises(BadConfig):
        BoundInputs([1.0], 0.0, 0.2)
    with pytest.raises(InvalidSigma):
        BoundInputs([1.0], 0.05, 0.0)
    inp = BoundInputs([1.0, 2.0], 0.05, 0.2)
    with pytest.raises(UnboundedReward):
        certify_expected_reward(inp, "CdfDkw", 0.0, None)
    with pytest.raises(BadConfig):
        certify_expected_reward(inp, "CdfDkw", 0.0, 1.5)
    with pytest.raises(BadConfig):
        certify_expected_reward(inp, "BernoulliCP", 0.0, 2.0)
    with pytest.raises(BadConfig):
        certify_expected_reward(BoundInputs([0.5], 0.05, 0.2), "PerThresholdCP", 0.0, 1.0)
    with pytest.raises(BadConfig):
        certify_expected_reward(inp, "Median", 0.0, 2.0)


def test_defaults():
    assert default_method("survival") == "PerThresholdCP"
    assert default_method("terminal", [0.0, 1.0, 1.0], 0.0, 1.0) == "BernoulliCP"
    assert default_method("terminal", [0.0, 0.5], 0.0, 1.0) == "CdfDkw"
    g = default_budget_grid(0.2)
    assert g[0] == 0.0 and g[-1] == pytest.approx(0.8) and np.all(np.diff(g) > 0)


def test_outputs_rounded_down():
    x = (np.random.default_rng(6).random(300) < 0.7).astype(float)
    c = certify_expected_reward(BoundInputs(x, 0.05, 0.3, [0.1]), "BernoulliCP", 0.0, 1.0)
    exact = theorem1_lower(clopper_pearson_lower(int(x.sum()), 300, 0.05), 0.1, 0.3)
    assert c.lower_bounds[0] <= exact and exact - c.lower_bounds[0] < 2 * OUTPUT_RESOLUTION
