import math

import numpy as np
import pytest
from scipy import stats

from glauber_exclusion import dual as D
from glauber_exclusion import graphical as G
from glauber_exclusion.errors import (
    ConfigurationError,
    HorizonExceeded,
    MissingLeafSpin,
    TreeSizeExplosion,
)
from glauber_exclusion.flip_model import make_model
from glauber_exclusion.hydrodynamics import derived_functions, solve_ode
from glauber_exclusion.lattice import Torus, ball_size, center_position

import oracles
from samplers import small_histories, small_trees

DEMASI = make_model("demasi", gamma=5 / 12)
CONST = make_model("constant")
THETA = make_model("theta", theta=1.0)


def _random_table_model(seed, d=1):
    rng = np.random.default_rng(seed)
    return make_model("table", d=d, rates=oracles.random_attractive_rates(
        rng, ball_size(1, d), center_position(1, d)))


def test_particle_labels():
    w = D.ParticleLabel(0)
    assert w.child(2).is_descendant_of(w) and not w.is_descendant_of(w.child(2))
    assert w.child(0) < w.child(1)


def test_ibp_without_time_has_no_internal_nodes():
    tree = D.run_ibp([0, 1], DEMASI.decomposition, 0.0, 0)
    assert len(tree) == 2 and tree.internal_nodes() == []
    with pytest.raises(ConfigurationError):
        D.run_ibp([D.ParticleLabel(0), D.ParticleLabel(0, (1,))], DEMASI.decomposition, 1.0, 0)


def test_ibp_size_cap():
    with pytest.raises(TreeSizeExplosion):
        D.run_ibp([0], DEMASI.decomposition, 5.0, 0, cap=50)


def test_ibp_mean_size_is_exponential():
    dec = DEMASI.decomposition
    T = 0.5
    sizes = D.ibp_sizes(dec, T, 10000, 1).astype(float)
    mean = math.exp(2 * dec.total_rate * T)
    assert abs(sizes.mean() - mean) <= 3 * sizes.std(ddof=1) / 100
    tree_sizes = np.array([len(D.run_ibp([0], dec, T, s).leaves()) for s in range(2000)], float)
    assert abs(tree_sizes.mean() - mean) <= 3 * tree_sizes.std(ddof=1) / math.sqrt(2000)


def test_ibp_second_moment_bound():
    dec = DEMASI.decomposition
    for T in (0.25, 0.5, 1.0):
        sizes = D.ibp_sizes(dec, T, 10000, 2).astype(float)
        kappa = (4 + 4) * dec.total_rate
        assert np.mean(sizes ** 2) <= math.exp(kappa * T)


def test_bep_groups_are_dominated_by_ibp_leaves():
    dec = DEMASI.decomposition
    reps = 10000
    w = np.sort(D.bep_group_counts(dec, Torus(1, 32), [0], 1.0, reps, 3))
    wt = np.sort(D.ibp_sizes(dec, 1.0, reps, 3))
    grid = np.arange(0, max(w.max(), wt.max()) + 1)
    cdf_w = np.searchsorted(w, grid, side="right") / reps
    cdf_wt = np.searchsorted(wt, grid, side="right") / reps
    # dominance up to a two-sample DKW band at level 1e-3
    band = 2 * math.sqrt(math.log(2 / 1e-3) / (2 * reps))
    assert np.all(cdf_w >= cdf_wt - band)
    assert w.mean() <= wt.mean()


def test_bep_without_time():
    hist = D.run_bep([0, 3], DEMASI.decomposition, Torus(1, 8), 0.0, 0)
    assert [hist.group_site(g) for g in hist.alive_groups()] == [0, 3]
    assert hist.marks == []


def test_spins_atop_of_a_bare_forest_are_leaf_spins():
    tree = D.run_ibp([0, 1], DEMASI.decomposition, 0.0, 0)
    out = D.spins_atop(tree, DEMASI.decomposition, [1, -1])
    assert list(out.values()) == [1, -1]
    with pytest.raises(MissingLeafSpin):
        D.spins_atop(tree, DEMASI.decomposition, [1])
    with pytest.raises(HorizonExceeded):
        D.pivotal_ibp(tree, DEMASI.decomposition, 1.0)


def test_constant_model_root_ignores_leaves_after_a_ring():
    dec = CONST.decomposition
    for seed in range(50):
        tree = D.run_ibp([0], dec, 1.0, seed)
        leaves = tree.leaves()
        if not tree.internal_nodes():
            assert D.pivotal_ibp(tree, dec).labels == {tree.labels[0]}
            continue
        a = D.spins_atop(tree, dec, [1] * len(leaves))
        b = D.spins_atop(tree, dec, [-1] * len(leaves))
        assert a == b
        assert D.pivotal_ibp(tree, dec).empty


@pytest.mark.parametrize("model", [DEMASI, THETA, CONST, _random_table_model(1),
                                   _random_table_model(2, d=2)],
                         ids=["demasi", "theta", "constant", "table1", "table2"])
def test_pivotal_ibp_matches_enumeration(model):
    dec = model.decomposition
    for tree in small_trees(model, 100, 12, roots=(0, 1), seed0=17):
        expected, constant, table = oracles.ibp_pivotal_labels(tree, dec.tables, tree.horizon)
        got = D.pivotal_ibp(tree, dec)
        assert set(got.labels) == expected
        for r, lab in enumerate(tree.labels[k] for k in tree.roots):
            assert (got.root_values[lab] != 0) == constant[r]
            if constant[r]:
                assert got.root_values[lab] == table[0][r]
        assert oracles.is_monotone_table(len(tree.leaves()), table)


@pytest.mark.parametrize("model", [DEMASI, THETA, _random_table_model(3)],
                         ids=["demasi", "theta", "table"])
def test_bep_superset_contains_pivotal_groups(model):
    dec = model.decomposition
    for hist in small_histories(model, 100, seed0=5):
        expected, table = oracles.bep_pivotal_labels(hist, dec.tables, hist.horizon)
        got = D.pivotal_bep_superset(hist, dec)
        assert expected <= set(got.labels)
        if got.empty:
            assert len(set(table)) == 1


def test_bep_superset_without_rings():
    hist = D.run_bep([0, 2], DEMASI.decomposition, Torus(1, 8), 1e-6, 0)
    got = D.pivotal_bep_superset(hist, DEMASI.decomposition)
    assert got.labels == {D.ParticleLabel(0), D.ParticleLabel(2)}


def test_constant_model_survival_is_exponential():
    times = [0.25, 0.5, 1.0]
    est = D.estimate_survival_functions(CONST.decomposition, times, 20000, 4)
    for t, phi, se in zip(times, est.phi, est.phi_se):
        assert abs(phi - math.exp(-2 * t)) <= 3 * se


def test_survival_estimates_need_enough_replicas():
    with pytest.raises(ConfigurationError):
        D.estimate_survival_functions(DEMASI.decomposition, [1.0], 50, 0)


def test_theta_extinction_mean_follows_hydrodynamics():
    times = [0.5, 1.0, 2.0]
    est = D.estimate_survival_functions(THETA.decomposition, times, 20000, 6)
    res = derived_functions(THETA.reaction(), 2.0)
    for j, t in enumerate(times):
        assert abs(est.theta[j] - np.interp(t, res.times, res.theta)) <= 3 * est.theta_se[j]
        assert abs(est.phi[j] - np.interp(t, res.times, res.phi)) <= 3 * est.phi_se[j]


def test_spin_atop_mean_for_mixed_leaves():
    target = solve_ode(THETA.reaction(), 0.3, 1.0).values[-1]
    mean, se = D.spin_atop_mean(THETA.decomposition, 0.3, 1.0, 20000, 8)
    assert abs(mean - target) <= 3 * se


def test_constant_model_coupling_rarely_fails():
    est = D.coupling_failure_probability(CONST.decomposition, Torus(1, 64), [0], 2000, 0)
    assert est.probability < 1e-3


def test_successful_coupling_gives_equal_spins_atop():
    # L = 8 keeps the pure-Python coupling affordable
    dec = DEMASI.decomposition
    torus = Torus(1, 8)
    rng = np.random.default_rng(0)
    successes = 0
    for seed in range(300):
        out = D.couple_bep_ibp([0, 1], dec, torus, 0.6, seed)
        if not out.success:
            continue
        successes += 1
        bep, ibp = out.bep, out.ibp
        index = {lab: k for k, lab in enumerate(bep.p_labels)}
        shared = {w: int(rng.choice([-1, 1])) for w in out.pivotal}
        gspins = {}
        for w, s in shared.items():
            gspins[bep.p_group[index[w]]] = s
        group_vals = [gspins.get(g, int(rng.choice([-1, 1]))) for g in bep.alive_groups()]
        leaf_vals = [shared.get(ibp.labels[k], int(rng.choice([-1, 1]))) for k in ibp.leaves()]
        a = D.spins_atop(bep, dec, group_vals)
        b = D.spins_atop(ibp, dec, leaf_vals)
        assert a == b
    assert successes >= 100


def test_bep_spins_atop_match_exact_chain():
    model = DEMASI
    dec = model.decomposition
    L, T, reps = 4, 0.5, 20000
    torus = Torus(1, L)
    x = np.array([1, -1, -1, 1], np.int8)
    counts = np.zeros(4)
    for s in range(reps):
        hist = D.run_bep([0, 1], dec, torus, T, s)
        spins = list(hist.spins_from_configuration(x, dec).values())
        counts[(spins[0] == 1) + 2 * (spins[1] == 1)] += 1
    P = oracles.transition(oracles.ring_generator(L, 1, model.table.rates), T)[oracles.code_of(x)]
    exact = np.zeros(4)
    for code, p in enumerate(P):
        exact[(code & 1) + 2 * ((code >> 1) & 1)] += p
    assert 0.5 * np.abs(counts / reps - exact).sum() <= 0.02
    assert stats.chisquare(counts, reps * exact).pvalue > 1e-3


def test_history_marks_match_bep_marks():
    """Forward-stream extraction and the direct BEP give the same mark statistics."""
    dec = DEMASI.decomposition
    torus = Torus(1, 4)
    T, reps = 0.3, 20000
    fwd = [D.history_from_stream(G.generate_marks(torus, dec, "GC1", T, s), [0])
           for s in range(reps)]
    bep = [D.bep_mark_counts(D.run_bep([0], dec, torus, T, s)) for s in range(reps)]
    for key in ("glauber", "groups"):
        a = np.array([r[key] for r in fwd])
        b = np.array([r[key] for r in bep])
        top = int(max(a.max(), b.max()))
        table = np.array([np.bincount(np.minimum(a, 4), minlength=top + 1)[:5],
                          np.bincount(np.minimum(b, 4), minlength=top + 1)[:5]])
        table = table[:, table.sum(axis=0) > 0]
        assert stats.chi2_contingency(table)[1] > 1e-3
    ea = np.array([r["exclusion"] for r in fwd], float)
    eb = np.array([r["exclusion"] for r in bep], float)
    se = math.sqrt(ea.var() / reps + eb.var() / reps)
    assert abs(ea.mean() - eb.mean()) <= 4 * se
