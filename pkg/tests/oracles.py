"""Independent reference computations used as test oracles.

Nothing here imports the package's own evaluation code paths: trees and
histories are read through their public attributes only, and every
quantity is recomputed by brute force.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np
from scipy.linalg import expm, null_space


# ---------------------------------------------------------------------------
# exhaustive pivotality
# ---------------------------------------------------------------------------
def _evaluate(node, children, types, tables, leaf_value, is_leaf, memo):
    if node in memo:
        return memo[node]
    if is_leaf(node):
        v = leaf_value(node)
    else:
        code = 0
        for j, c in enumerate(children[node]):
            if _evaluate(c, children, types, tables, leaf_value, is_leaf, memo) == 1:
                code |= 1 << j
        v = int(tables[types[node]][code])
    memo[node] = v
    return v


def ibp_root_function(tree, tables, t):
    """Truth table of the roots as a function of the alive leaves.

    Returns ``(leaf_ids, table)`` where ``table[a]`` is the tuple of root
    spins for assignment ``a`` (bit ``j`` set iff leaf ``leaf_ids[j]`` is +1).
    """
    leaves = [k for k in range(len(tree.labels)) if tree.birth[k] <= t < tree.death[k]]
    pos = {k: j for j, k in enumerate(leaves)}
    out = []
    for a in range(1 << len(leaves)):
        memo = {}
        roots = tuple(
            _evaluate(r, tree.children, tree.types, tables,
                      lambda k: 1 if (a >> pos[k]) & 1 else -1,
                      lambda k: tree.death[k] > t, memo)
            for r in tree.roots)
        out.append(roots)
    return leaves, out


def pivotal_by_enumeration(n_args, table):
    """Arguments whose flip changes some output for some assignment."""
    piv = set()
    for j in range(n_args):
        for a in range(1 << n_args):
            if not (a >> j) & 1 and table[a] != table[a | (1 << j)]:
                piv.add(j)
                break
    return piv


def is_monotone_table(n_args, table):
    for j in range(n_args):
        for a in range(1 << n_args):
            if not (a >> j) & 1:
                lo, hi = table[a], table[a | (1 << j)]
                if any(x > y for x, y in zip(lo, hi)):
                    return False
    return True


def bep_root_function(hist, tables, t):
    """Roots of a BEP history as a function of the spins of the alive groups."""
    groups = [g for g in range(len(hist.g_birth)) if hist.g_birth[g] <= t < hist.g_death[g]]
    pos = {g: j for j, g in enumerate(groups)}
    out = []
    for a in range(1 << len(groups)):
        memo = {}
        roots = tuple(
            _evaluate(r, hist.p_children, hist.p_type, tables,
                      lambda k: 1 if (a >> pos[hist.p_group[k]]) & 1 else -1,
                      lambda k: hist.p_death[k] > t, memo)
            for r in hist.roots)
        out.append(roots)
    return groups, out


# ---------------------------------------------------------------------------
# exact reaction coefficients
# ---------------------------------------------------------------------------
def reaction_coefficients_exact(rates_by_window, n, center):
    """Coefficients of ``E_rho[-2 x_center c(x)]`` in exact rational arithmetic."""
    total = [Fraction(0)] * (n + 1)
    for code in range(1 << n):
        x = [1 if (code >> j) & 1 else -1 for j in range(n)]
        poly = [Fraction(-2 * x[center]) * Fraction(rates_by_window[code])]
        for s in x:
            # multiply by (1 + s rho) / 2
            new = [Fraction(0)] * (len(poly) + 1)
            for k, c in enumerate(poly):
                new[k] += c / 2
                new[k + 1] += c * s / 2
            poly = new
        for k, c in enumerate(poly):
            total[k] += c
    return total


# ---------------------------------------------------------------------------
# exact small chains
# ---------------------------------------------------------------------------
def ring_window(code, u, m, L):
    """Window code of configuration ``code`` at ``u`` on the ring, offsets -m..m."""
    w = 0
    for j, off in enumerate(range(-m, m + 1)):
        if (code >> ((u + off) % L)) & 1:
            w |= 1 << j
    return w


def ring_generator(L, m, rates_by_window):
    """Generator of the Glauber-Exclusion chain on the ring of length ``L``.

    State bit ``u`` set iff spin ``u`` is +1; edges ``(u, u+1)`` swap at
    rate ``L**2``; site ``u`` flips at rate ``c(window)``.
    """
    n = 1 << L
    Q = np.zeros((n, n))
    for s in range(n):
        for u in range(L):
            v = (u + 1) % L
            if ((s >> u) & 1) != ((s >> v) & 1):
                Q[s, s ^ (1 << u) ^ (1 << v)] += L ** 2
            Q[s, s ^ (1 << u)] += rates_by_window[ring_window(s, u, m, L)]
    Q -= np.diag(Q.sum(axis=1))
    return Q


def stationary(Q):
    v = null_space(Q.T)[:, 0]
    return v / v.sum()


def transition(Q, t):
    return expm(Q * t)


def spins_of(code, L):
    return np.array([1 if (code >> u) & 1 else -1 for u in range(L)], dtype=np.int8)


def code_of(x):
    return int(sum(1 << u for u, s in enumerate(x) if s == 1))


# ---------------------------------------------------------------------------
# two interchange walkers on the ring
# ---------------------------------------------------------------------------
def ip2_close_probability(L, theta, k, start):
    """``P(dist(U1, U2) <= k at an Exp(theta) time)`` by a dense pair-chain solve.

    States are ordered pairs of distinct sites.  Each edge rings at rate
    ``L**2`` and swaps the occupants of its endpoints.
    """
    pairs = [(a, b) for a in range(L) for b in range(L) if a != b]
    idx = {p: i for i, p in enumerate(pairs)}
    Q = np.zeros((len(pairs), len(pairs)))
    for (a, b), i in idx.items():
        for u in range(L):
            v = (u + 1) % L

            def swap(x):
                return v if x == u else (u if x == v else x)

            na, nb = swap(a), swap(b)
            if (na, nb) != (a, b):
                Q[i, idx[(na, nb)]] += L ** 2
    Q -= np.diag(Q.sum(axis=1))
    # resolvent: theta (theta I - Q)^-1
    R = theta * np.linalg.inv(theta * np.eye(len(pairs)) - Q)
    close = np.array([min(abs(a - b), L - abs(a - b)) <= k for a, b in pairs], dtype=float)
    return float(R[idx[start]] @ close)


# ---------------------------------------------------------------------------
# product laws and the perturbation bound
# ---------------------------------------------------------------------------
def product_probabilities(rho, n):
    out = np.empty(1 << n)
    for a in range(1 << n):
        p = 1.0
        for j in range(n):
            p *= (1 + rho) / 2 if (a >> j) & 1 else (1 - rho) / 2
        out[a] = p
    return out


def all_subsets(n):
    return [frozenset(c) for r in range(n + 1) for c in itertools.combinations(range(n), r)]


# ---------------------------------------------------------------------------
# random attractive rate tables
# ---------------------------------------------------------------------------
def random_up_set(rng, n, n_generators):
    """Indicator of the up-closure of a few random codes (bitwise supersets)."""
    gens = rng.integers(0, 1 << n, n_generators)
    codes = np.arange(1 << n)
    return np.any((codes[:, None] & gens[None, :]) == gens[None, :], axis=1)


def random_attractive_rates(rng, n, center, n_layers=4):
    """Rates ``sum_i w_i 1{f_i(x) = -x(center)}`` for random increasing ``f_i`` and
    positive weights, including both constants so every rate is positive."""
    codes = np.arange(1 << n)
    center_spin = np.where((codes >> center) & 1 == 1, 1, -1)
    rates = rng.uniform(0.1, 2.0) * (center_spin == -1) + rng.uniform(0.1, 2.0) * (center_spin == 1)
    for _ in range(n_layers):
        f = np.where(random_up_set(rng, n, int(rng.integers(1, 4))), 1, -1)
        rates = rates + rng.uniform(0.05, 1.5) * (f == -center_spin)
    return rates


# ---------------------------------------------------------------------------
# pivotal sets by enumeration, keyed by label
# ---------------------------------------------------------------------------
def ibp_pivotal_labels(tree, tables, t):
    """Exhaustively pivotal leaf labels and per-root constancy of an IBP tree."""
    leaves, table = ibp_root_function(tree, tables, t)
    piv = pivotal_by_enumeration(len(leaves), table)
    constant = [len({row[r] for row in table}) == 1 for r in range(len(tree.roots))]
    return {tree.labels[leaves[j]] for j in piv}, constant, table


def bep_pivotal_labels(hist, tables, t):
    """Exhaustively pivotal group labels of a BEP history (groups as shared arguments)."""
    groups, table = bep_root_function(hist, tables, t)
    piv = pivotal_by_enumeration(len(groups), table)
    return {hist.group_label(groups[j], t) for j in piv}, table
