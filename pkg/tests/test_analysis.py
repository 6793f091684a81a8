import dataclasses
import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from glauber_exclusion import analysis as A
from glauber_exclusion.errors import (
    CoincidentStart,
    ConfigurationError,
    PreconditionViolated,
    ProfileDoesNotBracket,
    RhoDegenerate,
    SetTooLarge,
    SupportMismatch,
)
from glauber_exclusion.flip_model import make_model

import oracles

DEMASI = make_model("demasi", gamma=5 / 12)
CONST = make_model("constant")


# -- total variation -----------------------------------------------------------
def test_tv_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert A.tv_exact_small(p, p) == 0
    assert A.tv_exact_small([1, 0], [0, 1]) == 1
    assert A.tv_exact_small({"a": 1.0}, {"b": 0.5, "a": 0.5}) == 0.5
    with pytest.raises(SupportMismatch):
        A.tv_exact_small([1.0], [0.5, 0.5])


def test_product_law_tv_matches_binomial_formula():
    rho = math.exp(-2)
    n = 8
    exact = 0.5 * sum(math.comb(n, k) * abs(((1 + rho) / 2) ** k * ((1 - rho) / 2) ** (n - k) - 2 ** -n)
                      for k in range(n + 1))
    assert A.tv_exact_small(A.product_law(rho, n), A.product_law(0.0, n)) == pytest.approx(exact, abs=1e-14)
    assert np.allclose(A.product_law(0.3, 5), oracles.product_probabilities(0.3, 5))


def test_threshold_tv():
    assert A.threshold_tv([1, 1, 1], [0, 0, 0]) == 1
    assert A.threshold_tv([0, 0], [1, 1]) == 0
    assert A.threshold_tv([0, 2, 2, 4], [0, 0, 2, 2]) == 0.25


@given(st.lists(st.integers(-5, 5), min_size=1, max_size=30),
       st.lists(st.integers(-5, 5), min_size=1, max_size=30))
def test_threshold_tv_is_below_empirical_tv(a, b):
    pa = np.bincount(np.array(a) + 5, minlength=11) / len(a)
    pb = np.bincount(np.array(b) + 5, minlength=11) / len(b)
    assert A.threshold_tv(a, b) <= 0.5 * np.abs(pa - pb).sum() + 1e-12


def test_wilson_interval_contains_estimate():
    lo, hi = A.wilson_interval(30, 100)
    assert lo < 0.3 < hi
    lo, hi = A.wilson_interval(0, 100)
    assert lo == pytest.approx(0, abs=1e-12) and hi > 0


# -- mixing profiles -----------------------------------------------------------
def test_profile_at_time_zero_is_fully_unmixed():
    prof = A.mixing_profile(DEMASI, 8, [0.0, 0.5], 50, 0, t_star=2.0)
    assert prof.d_up[0] == 1
    assert prof.reopened == 0 and prof.order_violations == 0


def test_profile_is_worker_independent():
    a = A.mixing_profile(DEMASI, 8, [0.5, 1.0], 40, 3, t_star=2.0, workers=1)
    b = A.mixing_profile(DEMASI, 8, [0.5, 1.0], 40, 3, t_star=2.0, workers=2)
    assert a.to_csv() == b.to_csv()


def test_profile_guards():
    with pytest.raises(ConfigurationError):
        A.mixing_profile(DEMASI, 8, [1.0, 0.5], 10, 0)
    with pytest.raises(ConfigurationError):
        A.mixing_profile(DEMASI, 8, [1.0], 10, 0, t_star=0.5)


def test_profile_bounds_bracket_exact_chain():
    L, reps = 4, 3000
    times = np.array([0.1, 0.25, 0.5, 1.0, 2.0])
    prof = A.mixing_profile(DEMASI, L, times, reps, 11)
    Q = oracles.ring_generator(L, 1, DEMASI.table.rates)
    pi = oracles.stationary(Q)
    plus = oracles.code_of(np.ones(L))
    for j, t in enumerate(times):
        P = oracles.transition(Q, t)
        worst = max(0.5 * np.abs(P[x] - pi).sum() for x in range(1 << L))
        from_plus = 0.5 * np.abs(P[plus] - pi).sum()
        sigma_up = math.sqrt(max(prof.d_up[j] * (1 - prof.d_up[j]), 1 / reps) / reps)
        assert worst <= prof.d_up[j] + 3 * sigma_up
        sigma_low = max((prof.d_low_hi[j] - prof.d_low_lo[j]) / (2 * 1.96), 1 / reps)
        assert prof.d_low[j] <= from_plus + 3 * sigma_low


def _fake_profile(d_up, d_low):
    prof = A.mixing_profile(CONST, 8, [0.5, 1.0, 1.5], 20, 0, t_star=2.0, bootstrap=0)
    d_up = np.asarray(d_up, float)
    d_low = np.asarray(d_low, float)
    return dataclasses.replace(prof, d_up=d_up, d_up_lo=d_up, d_up_hi=d_up, d_low=d_low,
                               d_low_lo=d_low, d_low_hi=d_low)


def test_mixing_time_edge_cases():
    ones = _fake_profile([1, 1, 1], [1, 1, 1])
    est = A.estimate_mixing_time(ones)
    assert est.one_sided == "lower" and est.upper == math.inf
    with pytest.raises(ProfileDoesNotBracket):
        A.estimate_mixing_time(ones, strict=True)
    zeros = _fake_profile([0, 0, 0], [0, 0, 0])
    est = A.estimate_mixing_time(zeros)
    assert est.upper_point == 0.5 and est.lower_point == 0.5
    mid = _fake_profile([1, 0.5, 0], [0.5, 0.25, 0])
    est = A.estimate_mixing_time(mid)
    assert est.upper_point == pytest.approx(1.25)
    assert est.lower_point == pytest.approx(1.0)
    assert est.one_sided is None


# -- correlations and replacement ----------------------------------------------
def test_constant_model_has_no_covariance():
    rep = A.correlation_report(CONST, 32, 0.5, 2000, 1, sites=[0, 1, 5])
    assert np.allclose(rep.covariance, rep.covariance.T)
    off = ~np.eye(3, dtype=bool)
    assert np.all(np.abs(rep.covariance[off]) <= 3 * rep.covariance_se[off])
    assert np.all(rep.deviation <= 3 * rep.deviation_se)
    assert np.all(np.abs(rep.lag_covariance[1:]) <= 3 * rep.lag_covariance_se[1:])


def test_correlations_at_time_zero_vanish():
    rep = A.correlation_report(DEMASI, 16, 0.0, 1000, 0)
    assert np.all(rep.deviation == 0) and np.all(rep.covariance == 0)
    assert rep.pooled_deviation == 0 and rep.max_lag_covariance == 0
    with pytest.raises(ConfigurationError):
        A.correlation_report(DEMASI, 16, 0.0, 999, 0)


def test_constant_model_replacement_is_exact():
    res = A.replacement_check(CONST, 32, [0, 1], 0.5, 4000, 2, pool=False)
    counts = res.empirical * res.n_samples
    assert stats.chisquare(counts, res.product * res.n_samples).pvalue > 1e-3
    assert res.ci_lo <= res.tv <= res.ci_hi


def test_replacement_edge_cases():
    res = A.replacement_check(DEMASI, 16, [], 1.0, 10, 0)
    assert res.tv == 0
    with pytest.raises(SetTooLarge):
        A.replacement_check(DEMASI, 16, range(9), 1.0, 10, 0)


def test_pooled_and_single_site_estimates_agree_in_law():
    sample = A.sample_from_all_plus(DEMASI, 32, 1.0, 1000, 5)
    pooled = A.replacement_check(DEMASI, 32, [0, 1], 1.0, 1000, 5, sample=sample)
    single = A.replacement_check(DEMASI, 32, [0, 1], 1.0, 1000, 5, pool=False, sample=sample)
    assert pooled.n_samples == 32 * single.n_samples
    assert np.abs(pooled.empirical - single.empirical).max() < 0.06


# -- perturbation of a product measure ------------------------------------------
def _mixture_oracle(n, rho, law, perts):
    """Mixture law by direct enumeration over full configurations."""
    p_plus = (1 + rho) / 2
    mu = np.zeros(1 << n)
    for code in range(1 << n):
        x = [(code >> i) & 1 for i in range(n)]
        for S, p in law.items():
            inside = sum(x[i] << j for j, i in enumerate(S))
            outside = 1.0
            for i in range(n):
                if i not in S:
                    outside *= p_plus if x[i] else 1 - p_plus
            mu[code] += p * perts[S][inside] * outside
    return mu


def test_perturbation_examples():
    res = A.perturbation_bound_check(3, 0.2, {(): 1.0}, {(): np.ones(1)})
    assert res.lhs == pytest.approx(0, abs=1e-15) and res.rhs == pytest.approx(0, abs=1e-15)
    res = A.perturbation_bound_check(1, 0.0, {(0,): 1.0}, {(0,): np.array([0.0, 1.0])})
    assert res.tv == pytest.approx(0.5) and res.lhs == pytest.approx(1.0)
    assert res.rhs == pytest.approx(1.0) and res.holds
    with pytest.raises(RhoDegenerate):
        A.perturbation_bound_check(1, 1.0, {(): 1.0}, {(): np.ones(1)})


def random_instance(rng, n):
    subsets = oracles.all_subsets(n)
    k = int(rng.integers(1, min(len(subsets), 6) + 1))
    chosen = [tuple(sorted(subsets[i])) for i in rng.choice(len(subsets), k, replace=False)]
    weights = rng.dirichlet(np.ones(k))
    law = dict(zip(chosen, weights))
    perts = {S: rng.dirichlet(np.ones(1 << len(S)) * 0.5) for S in chosen}
    return float(rng.uniform(-0.9, 0.9)), law, perts


def test_perturbation_bound_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        rho, law, perts = random_instance(rng, 3)
        res = A.perturbation_bound_check(3, rho, law, perts)
        mu = _mixture_oracle(3, rho, law, perts)
        nu = oracles.product_probabilities(rho, 3)
        assert res.tv == pytest.approx(0.5 * np.abs(mu - nu).sum(), abs=1e-12)
        assert res.chi2 == pytest.approx(np.sum((mu / nu - 1) ** 2 * nu), abs=1e-10)
        assert res.holds


# -- interchange walkers --------------------------------------------------------
def test_anticoncentration_trivial_threshold():
    est = A.anticoncentration(1, 16, 2.0, 8, 50, 0)
    assert est.estimate == 1.0
    with pytest.raises(CoincidentStart):
        A.anticoncentration(1, 16, 2.0, 1, 50, 0, starts=(3, 3))


@pytest.mark.parametrize("L,theta,k,start", [(8, 4.0, 1, (0, 1)), (10, 50.0, 2, (0, 3)),
                                              (7, 1.0, 1, (2, 3))])
def test_anticoncentration_matches_pair_chain(L, theta, k, start):
    exact = oracles.ip2_close_probability(L, theta, k, start)
    dist = min(abs(start[1] - start[0]), L - abs(start[1] - start[0]))
    assert A.anticoncentration_exact(L, theta, k, dist) == pytest.approx(exact, abs=1e-10)
    cond = A.anticoncentration(1, L, theta, k, 4000, 1, starts=start)
    assert abs(cond.estimate - exact) <= 3 * cond.se + 1e-7
    direct = A.anticoncentration(1, L, theta, k, 4000, 2, starts=start, method="direct")
    assert abs(direct.estimate - exact) <= 3 * math.sqrt(exact * (1 - exact) / 4000)


def test_two_dimensional_anticoncentration_runs():
    est = A.anticoncentration(2, 8, 4.0, 1, 500, 0)
    assert 0 < est.estimate < 1 and est.ci_lo <= est.estimate <= est.ci_hi


def test_dominance_coupling():
    same = A.ip2_dominance_check(1, 64, (0, 1, 0, 1), 0.1, 2000, 0)
    assert same.violations == 0 and np.all(same.final_gaps >= 0)
    res = A.ip2_dominance_check(1, 64, (0, 5, 10, 12), 0.1, 2000, 1)
    assert res.violations == 0 and res.jumps > 0
    res2 = A.ip2_dominance_check(2, 16, (0, 17, 0, 1), 0.1, 1000, 2)
    assert res2.violations == 0
    with pytest.raises(PreconditionViolated):
        A.ip2_dominance_check(1, 64, (0, 1, 0, 5), 0.1, 10, 0)


def test_walker_law_matches_simulation():
    L, t = 16, 0.01
    law = A.walker_occupation_law(L, t)
    assert law.sum() == pytest.approx(1.0)
    pos = A.walker_positions(1, L, t, 20000, 0)
    counts = np.bincount(pos, minlength=L)
    keep = law * 20000 >= 5
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(law[keep], law[~keep].sum()) * 20000
    exp = exp[obs + exp > 0]
    obs = obs[: len(exp)]
    assert stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue > 1e-3


def test_local_limit_scaling():
    for L in (64, 128, 256):
        ratio = A.local_limit_max(2 * L, 0.25) / A.local_limit_max(L, 0.25)
        assert 0.4 <= ratio <= 0.65


def test_two_dimensional_walker_law_is_product():
    law = A.walker_occupation_law(8, 0.02, d=2).reshape(8, 8)
    one = A.walker_occupation_law(8, 0.02)
    assert np.allclose(law, np.outer(one, one))


def test_map_replicas_preserves_order():
    assert A.map_replicas(abs, [-3, 2, -1], workers=2) == [3, 2, 1]
    assert list(itertools.islice(A.map_replicas(abs, [-1], workers=1), 1)) == [1]
