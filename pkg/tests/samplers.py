"""Deterministic samples of small dual trees and histories."""
import numpy as np

from glauber_exclusion import dual as D
from glauber_exclusion.errors import TreeSizeExplosion
from glauber_exclusion.lattice import Torus


def small_trees(model, count, max_leaves, roots=(0,), seed0=0):
    """Deterministic sample of IBP trees with few leaves (over-sampled then filtered)."""
    rng = np.random.default_rng(seed0)
    out = []
    seed = seed0
    while len(out) < count:
        # horizons of a few mean ring times keep most trees small
        T = float(rng.uniform(0.0, 3.0 / model.decomposition.total_rate))
        seed += 1
        try:
            tree = D.run_ibp(list(roots), model.decomposition, T, seed - 1, cap=4 * max_leaves)
        except TreeSizeExplosion:
            continue
        if len(tree.leaves()) <= max_leaves:
            out.append(tree)
    return out


def small_histories(model, count, seed0=0, L=6, max_groups=12):
    """Deterministic sample of BEP histories from two neighbours with few alive groups."""
    rng = np.random.default_rng(seed0)
    out = []
    seed = seed0
    while len(out) < count:
        T = float(rng.uniform(0.0, 2.5 / model.decomposition.total_rate))
        seed += 1
        try:
            hist = D.run_bep([0, 1], model.decomposition, Torus(1, L), T, seed - 1,
                             cap=50 * max_groups)
        except TreeSizeExplosion:
            continue
        if len(hist.alive_groups()) <= max_groups:
            out.append(hist)
    return out
