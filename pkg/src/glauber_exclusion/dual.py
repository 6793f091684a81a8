"""The update history read backward: branching processes, spins atop, pivotal sets.

Objects
-------
* :class:`IbpTree`: the idealised branching process (off-lattice, every
  particle has its own clocks).  Built by :func:`run_ibp`.
* :class:`BepHistory`: the branching exclusion process on the torus.
  Particles sharing a site form a group that moves and rings together.
  Built by :func:`run_bep`.
* :func:`couple_bep_ibp`: both processes on one probability space, the
  pivotal particles sharing their clocks until the first interaction.

Labels are :class:`ParticleLabel` words ``(root, path)`` where ``path``
lists positions in the canonical ball order; the children of a word
append one position.

Monte Carlo estimators (:func:`estimate_survival_functions`,
:func:`coupling_failure_probability`, :func:`spin_atop_mean`) run in
numba kernels.  The survival and coupling kernels follow only pivotal
particles: a particle that stops being pivotal can never become pivotal
again, so its subtree is dropped without changing the law of the
pivotal set, of the root constants, or of the pivotal positions.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from numba import njit

from . import boolean, rng
from .errors import (
    ConfigurationError,
    HorizonExceeded,
    MissingLeafSpin,
    NoExtinctionSamples,
    TreeSizeExplosion,
)
from .flip_model import Decomposition
from .lattice import Torus

DEFAULT_CAP = 10 ** 6


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------
@dataclass(frozen=True, order=True)
class ParticleLabel:
    root: int
    path: tuple = ()

    def child(self, j: int) -> "ParticleLabel":
        return ParticleLabel(self.root, self.path + (int(j),))

    def is_descendant_of(self, other: "ParticleLabel") -> bool:
        return (self.root == other.root and len(self.path) > len(other.path)
                and self.path[: len(other.path)] == other.path)

    def __str__(self) -> str:
        return ".".join([str(self.root)] + [str(j) for j in self.path])


def _as_label(x) -> ParticleLabel:
    if isinstance(x, ParticleLabel):
        return x
    if isinstance(x, tuple):
        return ParticleLabel(int(x[0]), tuple(int(j) for j in x[1:]))
    return ParticleLabel(int(x), ())


def _python_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(rng.derive_seed(seed, rng.STREAM_DUAL, *keys)))


def _draw_type(gen: np.random.Generator, cum: np.ndarray) -> int:
    u = gen.random() * cum[-1]
    return int(min(np.searchsorted(cum, u, side="right"), len(cum) - 1))


# ---------------------------------------------------------------------------
# the idealised branching process
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class IbpTree:
    """Rooted forest; node ``k`` has ``labels[k]``, ``birth[k]``, ``death[k]``
    (``inf`` if alive at the horizon), ``types[k]`` (-1 for leaves) and
    ``children[k]`` (node ids in ball order, empty for leaves).  Children
    always have larger ids than their parent.
    """

    horizon: float
    n_children: int
    labels: List[ParticleLabel]
    parent: List[int]
    birth: List[float]
    death: List[float]
    types: List[int]
    children: List[tuple]
    roots: List[int]

    def __len__(self) -> int:
        return len(self.labels)

    def _check_time(self, t: Optional[float]) -> float:
        t = self.horizon if t is None else float(t)
        if t > self.horizon + 1e-12:
            raise HorizonExceeded(f"query time {t} beyond the horizon {self.horizon}")
        return t

    def is_internal(self, k: int, t: Optional[float] = None) -> bool:
        t = self._check_time(t)
        return self.death[k] <= t

    def leaves(self, t: Optional[float] = None) -> List[int]:
        """Node ids alive at time ``t`` (default: the horizon), in id order."""
        t = self._check_time(t)
        return [k for k in range(len(self)) if self.birth[k] <= t < self.death[k]]

    def leaf_labels(self, t: Optional[float] = None) -> List[ParticleLabel]:
        return [self.labels[k] for k in self.leaves(t)]

    def internal_nodes(self, t: Optional[float] = None) -> List[int]:
        t = self._check_time(t)
        return [k for k in range(len(self)) if self.death[k] <= t]

    def dump(self) -> str:
        """One node per line: ``label birth death type``."""
        lines = []
        for k in range(len(self)):
            death = "inf" if math.isinf(self.death[k]) else repr(self.death[k])
            lines.append(f"{self.labels[k]} {self.birth[k]!r} {death} {self.types[k]}")
        return "\n".join(lines) + "\n"


def _new_tree(horizon: float, n: int) -> IbpTree:
    return IbpTree(horizon=float(horizon), n_children=n, labels=[], parent=[], birth=[],
                   death=[], types=[], children=[], roots=[])


def _add_node(tree: IbpTree, label, parent: int, birth: float) -> int:
    tree.labels.append(label)
    tree.parent.append(parent)
    tree.birth.append(birth)
    tree.death.append(math.inf)
    tree.types.append(-1)
    tree.children.append(())
    return len(tree.labels) - 1


def _check_roots(roots) -> List[ParticleLabel]:
    labels = [_as_label(r) for r in roots]
    if len(set(labels)) != len(labels):
        raise ConfigurationError("roots must be distinct")
    for a in labels:
        for b in labels:
            if a.is_descendant_of(b):
                raise ConfigurationError(f"root {a} descends from root {b}")
    return labels


def run_ibp(roots, dec: Decomposition, T: float, seed: int, cap: int = DEFAULT_CAP) -> IbpTree:
    """Idealised branching process from the given roots up to time ``T``."""
    if T < 0:
        raise ConfigurationError("horizon must be non-negative")
    labels = _check_roots(roots)
    gen = _python_rng(seed, 1)
    cum = np.cumsum(dec.rates)
    lam = dec.total_rate
    n = dec.n
    tree = _new_tree(T, n)
    queue = []
    for lab in labels:
        k = _add_node(tree, lab, -1, 0.0)
        tree.roots.append(k)
        queue.append(k)
    alive = len(queue)
    head = 0
    while head < len(queue):
        k = queue[head]
        head += 1
        ring = tree.birth[k] + gen.exponential(1.0 / lam)
        if ring >= T:
            continue
        tree.death[k] = ring
        tree.types[k] = _draw_type(gen, cum)
        kids = []
        for j in range(n):
            c = _add_node(tree, tree.labels[k].child(j), k, ring)
            kids.append(c)
            queue.append(c)
        tree.children[k] = tuple(kids)
        alive += n - 1
        if alive > cap:
            raise TreeSizeExplosion(f"more than {cap} particles alive")
    return tree


# ---------------------------------------------------------------------------
# spins atop
# ---------------------------------------------------------------------------
def _leaf_spin_lookup(leaf_spins, keys: list, what: str) -> dict:
    if isinstance(leaf_spins, dict):
        out = {}
        for key in keys:
            if key not in leaf_spins:
                raise MissingLeafSpin(f"no spin for {what} {key}")
            out[key] = int(leaf_spins[key])
        return out
    arr = np.asarray(leaf_spins).reshape(-1)
    if len(arr) != len(keys):
        raise MissingLeafSpin(f"expected {len(keys)} leaf spins, got {len(arr)}")
    return {key: int(s) for key, s in zip(keys, arr)}


def _ibp_spins(tree: IbpTree, tables: np.ndarray, spins: dict, t: float) -> Dict[int, int]:
    """Spins of every node at query time ``t`` given spins of the leaves alive at ``t``."""
    value = {}
    for k in range(len(tree) - 1, -1, -1):
        if tree.birth[k] > t:
            continue
        if tree.death[k] > t:
            value[k] = spins[k]
            continue
        code = 0
        for j, c in enumerate(tree.children[k]):
            if value[c] == 1:
                code |= 1 << j
        value[k] = int(tables[tree.types[k], code])
    return value


def spins_atop(obj, dec: Decomposition, leaf_spins, t: Optional[float] = None) -> Dict[ParticleLabel, int]:
    """Spins of the roots given spins on the alive leaves.

    For an :class:`IbpTree` ``leaf_spins`` is a dict keyed by leaf label or a
    sequence aligned with :meth:`IbpTree.leaves`.  For a :class:`BepHistory`
    it is keyed by group label or aligned with :meth:`BepHistory.alive_groups`.
    """
    tables = dec.tables
    if isinstance(obj, IbpTree):
        t = obj._check_time(t)
        leaves = obj.leaves(t)
        if isinstance(leaf_spins, dict):
            by_label = _leaf_spin_lookup(leaf_spins, [obj.labels[k] for k in leaves], "leaf")
            spins = {k: by_label[obj.labels[k]] for k in leaves}
        else:
            spins = _leaf_spin_lookup(leaf_spins, leaves, "leaf")
        value = _ibp_spins(obj, tables, spins, t)
        return {obj.labels[r]: value[r] for r in obj.roots}
    if isinstance(obj, BepHistory):
        t = obj._check_time(t)
        groups = obj.alive_groups(t)
        if isinstance(leaf_spins, dict):
            by_label = _leaf_spin_lookup(leaf_spins, [obj.group_label(g) for g in groups], "group")
            gspin = {g: by_label[obj.group_label(g)] for g in groups}
        else:
            gspin = _leaf_spin_lookup(leaf_spins, groups, "group")
        value = obj._particle_spins(tables, gspin, t)
        return {obj.p_labels[r]: value[r] for r in obj.roots}
    raise ConfigurationError("expected an IbpTree or a BepHistory")


# ---------------------------------------------------------------------------
# pivotal sets
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PivotalSet:
    """Pivotal leaves at a query time.

    ``root_values`` maps each root to its constant value (+1/-1) or 0 when
    the root's update function is still non-constant.
    """

    labels: frozenset
    exact: bool
    root_values: dict

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def empty(self) -> bool:
        return not self.labels


def _read_once_reports(n_nodes, roots, children, types, is_internal, is_leaf, piv_tab, val_tab):
    """Bottom-up (constant value | pivotal leaf list) reports for a read-once forest."""
    const = {}
    pivots = {}
    for k in range(n_nodes - 1, -1, -1):
        if is_leaf(k):
            const[k] = 0
            pivots[k] = [k]
        elif is_internal(k):
            code = 0
            for j, c in enumerate(children[k]):
                if const[c] == 1:
                    code += boolean.CONST_PLUS * 3 ** j
                elif const[c] == -1:
                    code += boolean.CONST_MINUS * 3 ** j
            mask = int(piv_tab[types[k], code])
            if mask == 0:
                const[k] = int(val_tab[types[k], code])
                pivots[k] = []
            else:
                const[k] = 0
                out = []
                for j, c in enumerate(children[k]):
                    if mask >> j & 1:
                        out.extend(pivots[c])
                pivots[k] = out
    return const, pivots


def pivotal_ibp(tree: IbpTree, dec: Decomposition, t: Optional[float] = None) -> PivotalSet:
    """Exact pivotal leaves of the roots' update functions at time ``t``.

    Each subtree reports either a constant or its pivotal leaves; at a node
    of type ``i`` the children with constant reports are substituted into
    ``f_i`` and the restricted function's pivots select which children's
    pivotal leaves pass upward.  Exact because IBP trees are read-once.
    """
    t = tree._check_time(t)
    piv_tab, val_tab = boolean.restriction_tables(dec.tables)
    const, pivots = _read_once_reports(
        len(tree), tree.roots, tree.children, tree.types,
        lambda k: tree.death[k] <= t,
        lambda k: tree.birth[k] <= t < tree.death[k], piv_tab, val_tab)
    labels = frozenset(tree.labels[k] for r in tree.roots for k in pivots[r])
    return PivotalSet(labels=labels, exact=True,
                      root_values={tree.labels[r]: const[r] for r in tree.roots})


# ---------------------------------------------------------------------------
# the branching exclusion process
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class BepHistory:
    """Particles, groups and marks of a branching exclusion process.

    Particle ``k``: ``p_labels[k]``, ``p_parent[k]``, ``p_birth[k]``,
    ``p_death[k]``, ``p_type[k]``, ``p_children[k]`` and ``p_group[k]``.
    Group ``g``: ``g_birth[g]``, ``g_death[g]``, ``g_members[g]`` (particle
    ids, in joining order) and ``g_path[g]``, a list of ``(time, site)``
    giving its trajectory.  ``marks`` lists ``(time, kind, location, type)``
    with kind ``"exclusion"`` (location = edge) or ``"glauber"`` (site).
    """

    torus: Torus
    m: int
    horizon: float
    roots: List[int] = field(default_factory=list)
    p_labels: List[ParticleLabel] = field(default_factory=list)
    p_parent: List[int] = field(default_factory=list)
    p_birth: List[float] = field(default_factory=list)
    p_death: List[float] = field(default_factory=list)
    p_type: List[int] = field(default_factory=list)
    p_children: List[tuple] = field(default_factory=list)
    p_group: List[int] = field(default_factory=list)
    g_birth: List[float] = field(default_factory=list)
    g_death: List[float] = field(default_factory=list)
    g_members: List[list] = field(default_factory=list)
    g_path: List[list] = field(default_factory=list)
    marks: List[tuple] = field(default_factory=list)

    def _check_time(self, t: Optional[float]) -> float:
        t = self.horizon if t is None else float(t)
        if t > self.horizon + 1e-12:
            raise HorizonExceeded(f"query time {t} beyond the horizon {self.horizon}")
        return t

    def alive_groups(self, t: Optional[float] = None) -> List[int]:
        t = self._check_time(t)
        return [g for g in range(len(self.g_birth)) if self.g_birth[g] <= t < self.g_death[g]]

    def group_members_at(self, g: int, t: Optional[float] = None) -> List[int]:
        t = self._check_time(t)
        return [k for k in self.g_members[g] if self.p_birth[k] <= t]

    def group_label(self, g: int, t: Optional[float] = None) -> ParticleLabel:
        """Smallest label among the group's members present at time ``t``."""
        return min(self.p_labels[k] for k in self.group_members_at(g, t))

    def alive_labels(self, t: Optional[float] = None) -> List[ParticleLabel]:
        """``W_t``: one minimal label per alive group."""
        return [self.group_label(g, t) for g in self.alive_groups(t)]

    def group_site(self, g: int, t: Optional[float] = None) -> int:
        t = self._check_time(t)
        site = self.g_path[g][0][1]
        for s, u in self.g_path[g]:
            if s <= t:
                site = u
        return site

    def _particle_spins(self, tables, gspin: dict, t: float) -> Dict[int, int]:
        value = {}
        for k in range(len(self.p_labels) - 1, -1, -1):
            if self.p_birth[k] > t:
                continue
            if self.p_death[k] > t:
                value[k] = gspin[self.p_group[k]]
                continue
            code = 0
            for j, c in enumerate(self.p_children[k]):
                if value[c] == 1:
                    code |= 1 << j
            value[k] = int(tables[self.p_type[k], code])
        return value

    def spins_from_configuration(self, x, dec: Decomposition, t: Optional[float] = None):
        """Spins atop with each alive group reading ``x`` at its current site."""
        t = self._check_time(t)
        groups = self.alive_groups(t)
        spins = [int(x[self.group_site(g, t)]) for g in groups]
        return spins_atop(self, dec, spins, t)

    def dump(self) -> str:
        """One particle per line: label, birth, death, type, run-length site trajectory."""
        lines = []
        for k, lab in enumerate(self.p_labels):
            g = self.p_group[k]
            traj = [(s, u) for s, u in self.g_path[g]
                    if self.p_birth[k] <= s < self.p_death[k]] or [(self.p_birth[k],
                                                                      self.group_site(g, self.p_birth[k]))]
            runs = ";".join(f"{u}@{s!r}" for s, u in traj)
            death = "inf" if math.isinf(self.p_death[k]) else repr(self.p_death[k])
            lines.append(f"{lab} {self.p_birth[k]!r} {death} {self.p_type[k]} {runs}")
        return "\n".join(lines) + "\n"


class _BepState:
    """Mutable simulation state shared by :func:`run_bep` and :func:`couple_bep_ibp`."""

    def __init__(self, torus: Torus, dec: Decomposition, T: float, cap: int):
        torus.check_radius(dec.m)
        self.h = BepHistory(torus=torus, m=dec.m, horizon=float(T))
        self.nbr = torus.neighbor_table()
        self.ball = torus.ball_table(dec.m)
        self.edges = torus.edge_endpoints()
        self.site_of: Dict[int, int] = {}  # alive group -> site
        self.occ: Dict[int, int] = {}  # site -> alive group
        self.cap = cap
        self.n_alive = 0

    def edge_index(self, u: int, direction: int) -> int:
        axis = direction // 2
        d = self.h.torus.d
        if direction % 2 == 0:
            return u * d + axis
        return int(self.nbr[u, direction]) * d + axis

    def new_particle(self, label, parent, t, site):
        h = self.h
        k = len(h.p_labels)
        h.p_labels.append(label)
        h.p_parent.append(parent)
        h.p_birth.append(t)
        h.p_death.append(math.inf)
        h.p_type.append(-1)
        h.p_children.append(())
        g = self.occ.get(site)
        if g is None:
            g = len(h.g_birth)
            h.g_birth.append(t)
            h.g_death.append(math.inf)
            h.g_members.append([])
            h.g_path.append([(t, site)])
            self.occ[site] = g
            self.site_of[g] = site
        h.g_members[g].append(k)
        h.p_group.append(g)
        self.n_alive += 1
        if self.n_alive > self.cap:
            raise TreeSizeExplosion(f"more than {self.cap} particles alive")
        return k

    def move(self, g: int, direction: int, t: float, coin: float) -> bool:
        """Exclusion proposal for group ``g``; returns True if a mark was realised."""
        u = self.site_of[g]
        v = int(self.nbr[u, direction])
        other = self.occ.get(v)
        if other is not None and coin >= 0.5:
            return False
        self.h.marks.append((t, "exclusion", self.edge_index(u, direction), -1))
        self._place(g, v, t)
        if other is not None:
            self._place(other, u, t)
        else:
            del self.occ[u]
        return True

    def _place(self, g, site, t):
        self.site_of[g] = site
        self.occ[site] = g
        self.h.g_path[g].append((t, site))

    def split(self, g: int, typ: int, t: float) -> List[int]:
        """Glauber ring of group ``g``: every member is replaced by its children."""
        h = self.h
        u = self.site_of.pop(g)
        del self.occ[u]
        h.g_death[g] = t
        h.marks.append((t, "glauber", u, typ))
        born = []
        for k in list(h.g_members[g]):
            if h.p_death[k] <= t:
                continue
            h.p_death[k] = t
            h.p_type[k] = typ
            self.n_alive -= 1
            kids = []
            for j in range(self.ball.shape[1]):
                kids.append(self.new_particle(h.p_labels[k].child(j), k, t, int(self.ball[u, j])))
            h.p_children[k] = tuple(kids)
            born.extend(kids)
        return born


def _bep_init(E, torus: Torus, dec: Decomposition, T: float, cap: int) -> _BepState:
    sites = [torus.index(u) for u in E]
    if len(set(sites)) != len(sites):
        raise ConfigurationError("E must be a set of distinct sites")
    st = _BepState(torus, dec, T, cap)
    for u in sites:
        st.h.roots.append(st.new_particle(ParticleLabel(u, ()), -1, 0.0, u))
    return st


def run_bep(E, dec: Decomposition, torus: Torus, T: float, seed: int,
            cap: int = DEFAULT_CAP) -> BepHistory:
    """Branching exclusion process from the sites ``E`` up to time ``T``.

    Exclusion is thinned to the occupied region: each group proposes a jump
    across each incident edge at rate ``L**2``; a jump onto an occupied site
    is accepted with probability 1/2 (that edge was proposed by both groups)
    and then swaps the two groups.
    """
    if T < 0:
        raise ConfigurationError("horizon must be non-negative")
    st = _bep_init(E, torus, dec, T, cap)
    gen = _python_rng(seed, 2)
    cum = np.cumsum(dec.rates)
    lam = dec.total_rate
    jump = 2 * torus.d * torus.L ** 2
    t = 0.0
    while st.site_of:
        groups = sorted(st.site_of)
        rate = len(groups) * (lam + jump)
        t += gen.exponential(1.0 / rate)
        if t >= T:
            break
        g = groups[int(gen.integers(len(groups)))]
        if gen.random() * (lam + jump) < lam:
            st.split(g, _draw_type(gen, cum), t)
        else:
            st.move(g, int(gen.integers(2 * torus.d)), t, gen.random())
    return st.h


def pivotal_bep_superset(hist: BepHistory, dec: Decomposition, t: Optional[float] = None) -> PivotalSet:
    """Superset of the pivotal groups at time ``t``.

    Runs the read-once recursion on the particle tree, treating every
    particle leaf as an independent argument, and returns the labels of the
    groups containing a pivotal leaf.  A group pivotal for the true
    (shared-argument) function always contains such a leaf.
    """
    t = hist._check_time(t)
    piv_tab, val_tab = boolean.restriction_tables(dec.tables)
    const, pivots = _read_once_reports(
        len(hist.p_labels), hist.roots, hist.p_children, hist.p_type,
        lambda k: hist.p_death[k] <= t,
        lambda k: hist.p_birth[k] <= t < hist.p_death[k], piv_tab, val_tab)
    groups = {hist.p_group[k] for r in hist.roots for k in pivots[r]}
    return PivotalSet(labels=frozenset(hist.group_label(g, t) for g in groups), exact=False,
                      root_values={hist.p_labels[r]: const[r] for r in hist.roots})


# ---------------------------------------------------------------------------
# coupling of the two processes
# ---------------------------------------------------------------------------
@dataclass(eq=False)
class CouplingOutcome:
    success: bool
    failure_time: Optional[float]
    bep: BepHistory
    ibp: IbpTree
    pivotal: frozenset  # pivotal labels at the horizon while coupled (IBP side otherwise)


def couple_bep_ibp(E, dec: Decomposition, torus: Torus, T: float, seed: int,
                   cap: int = DEFAULT_CAP) -> CouplingOutcome:
    """Run the BEP and the IBP from ``E`` with shared clocks on the pivotal particles.

    While coupled, every particle pivotal for the roots carries one clock
    driving both processes; the other BEP groups and IBP leaves carry their
    own clocks.  The coupling fails at the first ring of a pivotal particle
    at ``u`` while another pivotal particle lies in ``ball(u, m)``; from then
    on all clocks are independent.
    """
    if T < 0:
        raise ConfigurationError("horizon must be non-negative")
    st = _bep_init(E, torus, dec, T, cap)
    bep = st.h
    ibp = _new_tree(T, dec.n)
    ibp_node = {}
    for k in bep.roots:
        lab = bep.p_labels[k]
        ibp_node[lab] = _add_node(ibp, lab, -1, 0.0)
        ibp.roots.append(ibp_node[lab])
    bep_particle = {bep.p_labels[k]: k for k in bep.roots}
    ibp_alive = set(ibp.roots)
    piv_tab, val_tab = boolean.restriction_tables(dec.tables)
    gen = _python_rng(seed, 3)
    cum = np.cumsum(dec.rates)
    lam = dec.total_rate
    jump = 2 * torus.d * torus.L ** 2
    coupled = True
    failure = None
    pivotal = frozenset(bep.p_labels[k] for k in bep.roots)

    def ibp_split(node, typ, t):
        ibp.death[node] = t
        ibp.types[node] = typ
        kids = tuple(_add_node(ibp, ibp.labels[node].child(j), node, t) for j in range(dec.n))
        ibp.children[node] = kids
        ibp_alive.discard(node)
        ibp_alive.update(kids)
        for c in kids:
            ibp_node[ibp.labels[c]] = c
        if len(ibp_alive) > cap:
            raise TreeSizeExplosion(f"more than {cap} particles alive")

    def current_pivotal(t):
        _, pivots = _read_once_reports(
            len(ibp), ibp.roots, ibp.children, ibp.types, lambda k: ibp.death[k] <= t,
            lambda k: ibp.birth[k] <= t < ibp.death[k], piv_tab, val_tab)
        return frozenset(ibp.labels[k] for r in ibp.roots for k in pivots[r])

    t = 0.0
    while True:
        # clock owners: shared pivotal labels, then BEP-only groups, then IBP-only leaves
        if coupled:
            shared = sorted(pivotal)
            shared_groups = {bep.p_group[bep_particle[w]] for w in shared}
            bep_only = sorted(g for g in st.site_of if g not in shared_groups)
            ibp_only = sorted(k for k in ibp_alive if ibp.labels[k] not in pivotal)
        else:
            shared = []
            bep_only = sorted(st.site_of)
            ibp_only = sorted(ibp_alive)
        n_clocks = len(shared) + len(bep_only) + len(ibp_only)
        n_groups = len(st.site_of)
        rate = n_clocks * lam + n_groups * jump
        if rate == 0:
            break
        t += gen.exponential(1.0 / rate)
        if t >= T:
            break
        x = gen.random() * rate
        if x >= n_clocks * lam:
            groups = sorted(st.site_of)
            st.move(groups[int(gen.integers(n_groups))], int(gen.integers(2 * torus.d)), t,
                    gen.random())
            continue
        slot = int(x // lam)
        typ = _draw_type(gen, cum)
        if slot < len(shared):
            w = shared[slot]
            g = bep.p_group[bep_particle[w]]
            u = st.site_of[g]
            near = set(int(v) for v in st.ball[u])
            others = [w2 for w2 in pivotal if w2 != w
                      and st.site_of[bep.p_group[bep_particle[w2]]] in near]
            for k in st.split(g, typ, t):
                bep_particle[bep.p_labels[k]] = k
            ibp_split(ibp_node[w], typ, t)
            if others:
                coupled = False
                failure = t
            else:
                pivotal = current_pivotal(t)
        elif slot < len(shared) + len(bep_only):
            for k in st.split(bep_only[slot - len(shared)], typ, t):
                bep_particle[bep.p_labels[k]] = k
        else:
            ibp_split(ibp_only[slot - len(shared) - len(bep_only)], typ, t)
    final_piv = pivotal if coupled else current_pivotal(T)
    return CouplingOutcome(success=coupled, failure_time=failure, bep=bep, ibp=ibp,
                           pivotal=final_piv)


# ---------------------------------------------------------------------------
# forward-history extraction (an independent route to the BEP law)
# ---------------------------------------------------------------------------
def history_from_stream(ms, E, t: Optional[float] = None) -> dict:
    """Marks met by the backward history of ``E`` read off a GC1 stream.

    Walks the marks with time at most ``t`` in decreasing time order,
    starting with one particle per site of ``E``: an exclusion mark touching
    an occupied site moves the occupants; a Glauber mark on an occupied site
    replaces that site's group by groups on its ball.  Returns counts of
    the marks met and the number of groups left.
    """
    from .graphical import EXCLUSION, GLAUBER

    torus = ms.torus
    t = ms.T if t is None else float(t)
    occupied = set(torus.index(u) for u in E)
    edges = torus.edge_endpoints()
    ball = torus.ball_table(ms.m)
    n_glauber = 0
    n_exclusion = 0
    for idx in range(len(ms) - 1, -1, -1):
        if ms.times[idx] > t:
            continue
        kind = ms.kinds[idx]
        loc = int(ms.locations[idx])
        if kind == EXCLUSION:
            a, b = (int(v) for v in edges[loc])
            ia, ib = a in occupied, b in occupied
            if ia or ib:
                n_exclusion += 1
                if ia != ib:
                    occupied.symmetric_difference_update((a, b))
        elif kind == GLAUBER and loc in occupied:
            n_glauber += 1
            occupied.discard(loc)
            occupied.update(int(v) for v in ball[loc])
    return {"glauber": n_glauber, "exclusion": n_exclusion, "groups": len(occupied)}


def bep_mark_counts(hist: BepHistory) -> dict:
    return {"glauber": sum(1 for m in hist.marks if m[1] == "glauber"),
            "exclusion": sum(1 for m in hist.marks if m[1] == "exclusion"),
            "groups": len(hist.alive_groups())}


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------
_LEAF = 0
_INTERNAL = 1
_CONST_PLUS = 2
_CONST_MINUS = 3
_DROPPED = 4


@njit(cache=True)
def _grow2(a, rows):
    out = np.full((max(2 * a.shape[0], rows), a.shape[1]), -1, dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@njit(cache=True)
def _grow1(a, n, fill):
    out = np.full(max(2 * len(a), n), fill, dtype=a.dtype)
    out[: len(a)] = a
    return out


@njit(cache=True)
def _pivotal_run(s, cum, piv_tab, val_tab, uncond_piv, n, n_roots, root_sites, use_pos,
                 nbr, ball, jump_rate, t_max, grid, rec_alive, rec_count, rec_value, cap):
    """One replica of the pivotal process; returns (failure time or -1, end time).

    Records, for each grid time and root: whether the root is non-constant,
    its number of pivotal leaves, and its constant value (0 if non-constant).
    """
    lam = cum[len(cum) - 1]
    size = 64
    parent = np.full(size, -1, dtype=np.int64)
    slot_in_parent = np.zeros(size, dtype=np.int64)
    typ = np.full(size, -1, dtype=np.int64)
    state = np.zeros(size, dtype=np.int64)
    root_of = np.zeros(size, dtype=np.int64)
    pos = np.zeros(size, dtype=np.int64)
    leaf_slot = np.full(size, -1, dtype=np.int64)
    children = np.full((size, n), -1, dtype=np.int64)
    leaves = np.zeros(size, dtype=np.int64)
    n_leaves = 0
    n_nodes = 0
    occ = np.full(nbr.shape[0] if use_pos else 1, -1, dtype=np.int64)
    count = np.zeros(n_roots, dtype=np.int64)
    value = np.zeros(n_roots, dtype=np.int64)
    stack = np.zeros(64, dtype=np.int64)

    for r in range(n_roots):
        parent[n_nodes] = -1
        root_of[n_nodes] = r
        state[n_nodes] = _LEAF
        pos[n_nodes] = root_sites[r]
        leaf_slot[n_nodes] = n_leaves
        leaves[n_leaves] = n_nodes
        if use_pos:
            occ[root_sites[r]] = n_nodes
        n_leaves += 1
        count[r] = 1
        n_nodes += 1

    t = 0.0
    gi = 0
    n_grid = len(grid)
    failure = -1.0
    while True:
        rate = n_leaves * lam + (n_leaves * jump_rate if use_pos else 0.0)
        if n_leaves == 0:
            t_next = np.inf
        else:
            t_next = t + rng.next_exponential(s, rate)
        while gi < n_grid and grid[gi] < t_next:
            for r in range(n_roots):
                rec_alive[gi, r] += 1 if value[r] == 0 else 0
                rec_count[gi, r] += count[r]
                rec_value[gi, r] += value[r]
            gi += 1
        if n_leaves == 0:
            break
        if t_next > t_max:
            t = t_max
            break
        t = t_next
        pick = rng.next_below(s, n_leaves)
        node = leaves[pick]
        if use_pos and rng.next_double(s) * rate >= n_leaves * lam:
            direction = rng.next_below(s, nbr.shape[1])
            u = pos[node]
            v = nbr[u, direction]
            other = occ[v]
            if other < 0:
                pos[node] = v
                occ[v] = node
                occ[u] = -1
            elif rng.next_double(s) < 0.5:
                pos[node] = v
                pos[other] = u
                occ[v] = node
                occ[u] = other
            continue
        i = 0
        x = rng.next_double(s) * lam
        while i < len(cum) - 1 and cum[i] <= x:
            i += 1
        if use_pos:
            u = pos[node]
            for j in range(ball.shape[1]):
                w = occ[ball[u, j]]
                if w >= 0 and w != node:
                    failure = t
            if failure >= 0:
                break
            occ[u] = -1
        # remove the ringing leaf from the pivotal list
        last = leaves[n_leaves - 1]
        leaves[pick] = last
        leaf_slot[last] = pick
        n_leaves -= 1
        leaf_slot[node] = -1
        r0 = root_of[node]
        count[r0] -= 1
        mask = uncond_piv[i]
        if mask != 0:
            state[node] = _INTERNAL
            typ[node] = i
            need = n_nodes + n
            if need > len(parent):
                parent = _grow1(parent, need, -1)
                slot_in_parent = _grow1(slot_in_parent, need, 0)
                typ = _grow1(typ, need, -1)
                state = _grow1(state, need, 0)
                root_of = _grow1(root_of, need, 0)
                pos = _grow1(pos, need, 0)
                leaf_slot = _grow1(leaf_slot, need, -1)
                children = _grow2(children, need)
            if n_leaves + n > len(leaves):
                leaves = _grow1(leaves, n_leaves + n, 0)
            for j in range(n):
                if (mask >> j) & 1:
                    c = n_nodes
                    n_nodes += 1
                    parent[c] = node
                    slot_in_parent[c] = j
                    typ[c] = -1
                    state[c] = _LEAF
                    root_of[c] = r0
                    if use_pos:
                        pos[c] = ball[u, j]
                        occ[pos[c]] = c
                    leaf_slot[c] = n_leaves
                    leaves[n_leaves] = c
                    n_leaves += 1
                    count[r0] += 1
                    children[node, j] = c
                else:
                    children[node, j] = -1
            if n_leaves > cap:
                return -2.0, t
            continue
        # oblivious update: the leaf becomes constant; propagate upward
        state[node] = _CONST_PLUS if val_tab[i, 0] == 1 else _CONST_MINUS
        c = node
        while True:
            p = parent[c]
            if p < 0:
                value[root_of[c]] = 1 if state[c] == _CONST_PLUS else -1
                break
            code = 0
            p3 = 1
            for j in range(n):
                ch = children[p, j]
                if ch >= 0:
                    if state[ch] == _CONST_PLUS:
                        code += p3
                    elif state[ch] == _CONST_MINUS:
                        code += 2 * p3
                p3 *= 3
            pm = piv_tab[typ[p], code]
            # drop free children that are no longer pivotal
            for j in range(n):
                ch = children[p, j]
                if ch >= 0 and (state[ch] == _LEAF or state[ch] == _INTERNAL) and not ((pm >> j) & 1):
                    top = 0
                    stack[top] = ch
                    top += 1
                    while top > 0:
                        top -= 1
                        x_node = stack[top]
                        if state[x_node] == _LEAF:
                            sl = leaf_slot[x_node]
                            last = leaves[n_leaves - 1]
                            leaves[sl] = last
                            leaf_slot[last] = sl
                            n_leaves -= 1
                            leaf_slot[x_node] = -1
                            count[root_of[x_node]] -= 1
                            if use_pos:
                                occ[pos[x_node]] = -1
                        elif state[x_node] == _INTERNAL:
                            for jj in range(n):
                                cc = children[x_node, jj]
                                if cc >= 0:
                                    if top >= len(stack):
                                        stack = _grow1(stack, top + 1, 0)
                                    stack[top] = cc
                                    top += 1
                        state[x_node] = _DROPPED
            if pm != 0:
                break
            state[p] = _CONST_PLUS if val_tab[typ[p], code] == 1 else _CONST_MINUS
            c = p
    return failure, t


@njit(cache=True)
def _pivotal_batch(key, reps, cum, piv_tab, val_tab, uncond_piv, n, n_roots, root_sites, use_pos,
                   nbr, ball, jump_rate, t_max, grid, cap):
    n_grid = len(grid)
    alive = np.zeros((n_grid, n_roots), dtype=np.int64)
    count = np.zeros((n_grid, n_roots), dtype=np.int64)
    count_sq = np.zeros((n_grid, n_roots), dtype=np.float64)
    val = np.zeros((n_grid, n_roots), dtype=np.int64)
    n_plus = np.zeros((n_grid, n_roots), dtype=np.int64)
    failures = np.full(reps, -1.0)
    end_times = np.zeros(reps)
    ra = np.zeros((n_grid, n_roots), dtype=np.int64)
    rc = np.zeros((n_grid, n_roots), dtype=np.int64)
    rv = np.zeros((n_grid, n_roots), dtype=np.int64)
    for rep in range(reps):
        s = rng.seeded_state_nb(rng.keyed_u64(key, rep))
        ra[:] = 0
        rc[:] = 0
        rv[:] = 0
        f, te = _pivotal_run(s, cum, piv_tab, val_tab, uncond_piv, n, n_roots, root_sites, use_pos,
                             nbr, ball, jump_rate, t_max, grid, ra, rc, rv, cap)
        failures[rep] = f
        end_times[rep] = te
        alive += ra
        count += rc
        for g in range(n_grid):
            for r in range(n_roots):
                count_sq[g, r] += rc[g, r] * rc[g, r]
                if rv[g, r] == 1:
                    n_plus[g, r] += 1
        val += rv
    return alive, count, count_sq, val, n_plus, failures, end_times


@njit(cache=True)
def _spin_atop_batch(key, reps, cum, tables, n, p_plus, t):
    """Spins atop of full IBP trees with iid leaf spins (root at time 0, leaves at ``t``)."""
    lam = cum[len(cum) - 1]
    out = np.zeros(reps, dtype=np.int8)
    f_type = np.zeros(64, dtype=np.int64)
    f_time = np.zeros(64)
    f_next = np.zeros(64, dtype=np.int64)
    f_code = np.zeros(64, dtype=np.int64)
    is_const = np.zeros(tables.shape[0], dtype=np.bool_)
    for i in range(tables.shape[0]):
        same = True
        for c in range(tables.shape[1]):
            if tables[i, c] != tables[i, 0]:
                same = False
        is_const[i] = same
    for rep in range(reps):
        s = rng.seeded_state_nb(rng.keyed_u64(key, rep))
        depth = 0
        birth = 0.0
        result = 0
        while True:
            # evaluate a fresh node born at `birth`
            ring = birth + rng.next_exponential(s, lam)
            if ring >= t:
                v = 1 if rng.next_double(s) < p_plus else -1
            else:
                x = rng.next_double(s) * lam
                i = 0
                while i < len(cum) - 1 and cum[i] <= x:
                    i += 1
                if is_const[i]:
                    v = tables[i, 0]
                else:
                    if depth >= len(f_type):
                        f_type = _grow1(f_type, depth + 1, 0)
                        f_time = _grow1(f_time, depth + 1, 0.0)
                        f_next = _grow1(f_next, depth + 1, 0)
                        f_code = _grow1(f_code, depth + 1, 0)
                    f_type[depth] = i
                    f_time[depth] = ring
                    f_next[depth] = 0
                    f_code[depth] = 0
                    depth += 1
                    birth = ring
                    continue
            # pass v up through completed frames
            while True:
                if depth == 0:
                    result = v
                    break
                fr = depth - 1
                if v == 1:
                    f_code[fr] |= 1 << f_next[fr]
                f_next[fr] += 1
                if f_next[fr] < n:
                    birth = f_time[fr]
                    break
                v = tables[f_type[fr], f_code[fr]]
                depth -= 1
            if depth == 0 and result != 0:
                break
        out[rep] = result
    return out


@njit(cache=True)
def _size_batch(key, reps, lam, n, t):
    """Number of IBP particles alive at ``t`` from one root (pure birth process)."""
    out = np.zeros(reps, dtype=np.int64)
    for rep in range(reps):
        s = rng.seeded_state_nb(rng.keyed_u64(key, rep))
        k = 1
        now = 0.0
        while True:
            now += rng.next_exponential(s, lam * k)
            if now >= t:
                break
            k += n - 1
        out[rep] = k
    return out


@njit(cache=True)
def _bep_group_batch(key, reps, lam, n_sites, nbr, ball, jump_rate, root_sites, t):
    """Number of BEP groups alive at ``t`` (group-level simulation, thinned exclusion)."""
    out = np.zeros(reps, dtype=np.int64)
    occ = np.full(n_sites, -1, dtype=np.int64)
    site = np.zeros(n_sites, dtype=np.int64)
    n_dir = nbr.shape[1]
    for rep in range(reps):
        s = rng.seeded_state_nb(rng.keyed_u64(key, rep))
        occ[:] = -1
        k = 0
        for u in root_sites:
            site[k] = u
            occ[u] = k
            k += 1
        now = 0.0
        per = lam + jump_rate
        while k > 0:
            now += rng.next_exponential(s, k * per)
            if now >= t:
                break
            g = rng.next_below(s, k)
            u = site[g]
            if rng.next_double(s) * per < lam:
                # remove g (swap with last), then occupy the ball
                occ[u] = -1
                k -= 1
                if g != k:
                    site[g] = site[k]
                    occ[site[g]] = g
                for j in range(ball.shape[1]):
                    v = ball[u, j]
                    if occ[v] < 0:
                        site[k] = v
                        occ[v] = k
                        k += 1
            else:
                v = nbr[u, rng.next_below(s, n_dir)]
                other = occ[v]
                if other < 0:
                    site[g] = v
                    occ[v] = g
                    occ[u] = -1
                elif rng.next_double(s) < 0.5:
                    site[g] = v
                    site[other] = u
                    occ[v] = g
                    occ[u] = other
        out[rep] = k
    return out


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------
def _pivot_arrays(dec: Decomposition):
    piv_tab, val_tab = boolean.restriction_tables(dec.tables)
    uncond = np.array([f.pivotal_mask for _, f in dec.entries], dtype=np.int64)
    return np.ascontiguousarray(piv_tab), np.ascontiguousarray(val_tab), uncond


@dataclass(frozen=True, eq=False)
class SurvivalEstimates:
    """Monte Carlo estimates of ``phi``, ``psi`` and ``theta`` on a time grid.

    ``rho_plus`` is the mean spin atop when every leaf reads +1 (a
    non-constant monotone function of all-plus inputs is +1).
    """

    times: np.ndarray
    reps: int
    phi: np.ndarray
    phi_se: np.ndarray
    psi: np.ndarray
    psi_se: np.ndarray
    theta: np.ndarray
    theta_se: np.ndarray
    n_extinct: np.ndarray
    rho_plus: np.ndarray


def estimate_survival_functions(dec: Decomposition, times, reps: int, seed: int,
                                cap: int = DEFAULT_CAP) -> SurvivalEstimates:
    """Survival probability, mean pivotal mass and extinction mean of one IBP root."""
    if reps < 100:
        raise ConfigurationError("need at least 100 replicas")
    grid = np.asarray(times, dtype=np.float64).reshape(-1)
    if len(grid) == 0 or np.any(np.diff(grid) < 0) or grid[0] < 0:
        raise ConfigurationError("times must be a sorted non-negative grid")
    piv_tab, val_tab, uncond = _pivot_arrays(dec)
    dummy = np.zeros((1, 1), dtype=np.int64)
    alive, count, count_sq, val, n_plus, failures, _ = _pivotal_batch(
        np.uint64(rng.derive_seed(seed, rng.STREAM_DUAL, 10)), int(reps), np.cumsum(dec.rates),
        piv_tab, val_tab, uncond, dec.n, 1, np.zeros(1, dtype=np.int64), False, dummy, dummy,
        0.0, float(grid[-1]) + 1.0, grid, cap)
    if np.any(failures == -2.0):
        raise TreeSizeExplosion(f"pivotal set exceeded {cap} particles")
    a = alive[:, 0].astype(float)
    phi = a / reps
    psi = count[:, 0] / reps
    psi_var = np.maximum(count_sq[:, 0] / reps - psi ** 2, 0.0)
    extinct = reps - alive[:, 0]
    theta = np.full(len(grid), np.nan)
    theta_se = np.full(len(grid), np.nan)
    pos = extinct > 0
    if not np.any(pos):
        raise NoExtinctionSamples("no replica went extinct on the grid")
    n_p = n_plus[:, 0].astype(float)
    theta[pos] = val[pos, 0] / extinct[pos]
    p_hat = n_p[pos] / extinct[pos]
    theta_se[pos] = 2 * np.sqrt(p_hat * (1 - p_hat) / extinct[pos])
    rho_plus = (val[:, 0] + alive[:, 0]) / reps
    return SurvivalEstimates(times=grid, reps=int(reps), phi=phi,
                             phi_se=np.sqrt(phi * (1 - phi) / reps), psi=psi,
                             psi_se=np.sqrt(psi_var / reps), theta=theta, theta_se=theta_se,
                             n_extinct=extinct, rho_plus=rho_plus)


@dataclass(frozen=True, eq=False)
class CouplingFailureEstimate:
    L: int
    reps: int
    failures: int
    probability: float
    se: float
    censored: int
    failure_times: np.ndarray


def coupling_failure_probability(dec: Decomposition, torus: Torus, E, reps: int, seed: int,
                                 t_max: float = 200.0, cap: int = DEFAULT_CAP) -> CouplingFailureEstimate:
    """Probability that the BEP/IBP coupling from ``E`` ever fails.

    Follows the pivotal particles only, as interchange walkers on the torus,
    until every root's update function is constant (success) or a pivotal
    particle rings with another within its ball (failure).  Runs still
    active at ``t_max`` are counted as censored successes.
    """
    torus.check_radius(dec.m)
    sites = np.array([torus.index(u) for u in E], dtype=np.int64)
    if len(set(sites.tolist())) != len(sites):
        raise ConfigurationError("E must be a set of distinct sites")
    piv_tab, val_tab, uncond = _pivot_arrays(dec)
    _, _, _, _, _, failures, ends = _pivotal_batch(
        np.uint64(rng.derive_seed(seed, rng.STREAM_DUAL, 11, torus.L)), int(reps),
        np.cumsum(dec.rates), piv_tab, val_tab, uncond, dec.n, len(sites), sites, True,
        torus.neighbor_table(), torus.ball_table(dec.m), float(2 * torus.d * torus.L ** 2),
        float(t_max), np.zeros(0), cap)
    if np.any(failures == -2.0):
        raise TreeSizeExplosion(f"pivotal set exceeded {cap} particles")
    failed = failures >= 0
    p = failed.mean()
    censored = int(np.sum(~failed & (ends >= t_max)))
    return CouplingFailureEstimate(L=torus.L, reps=int(reps), failures=int(failed.sum()),
                                   probability=float(p), se=float(np.sqrt(p * (1 - p) / reps)),
                                   censored=censored, failure_times=failures[failed])


def spin_atop_samples(dec: Decomposition, rho0: float, t: float, reps: int, seed: int) -> np.ndarray:
    """Root spins of ``reps`` full IBP trees whose leaves carry iid Rademacher(rho0) spins."""
    if not -1 <= rho0 <= 1:
        raise ConfigurationError("rho0 must lie in [-1, 1]")
    if t < 0:
        raise ConfigurationError("time must be non-negative")
    return _spin_atop_batch(np.uint64(rng.derive_seed(seed, rng.STREAM_DUAL, 12)), int(reps),
                            np.cumsum(dec.rates), dec.tables, dec.n, 0.5 * (1 + rho0), float(t))


def spin_atop_mean(dec: Decomposition, rho0: float, t: float, reps: int, seed: int) -> tuple:
    s = spin_atop_samples(dec, rho0, t, reps, seed).astype(float)
    return float(s.mean()), float(s.std(ddof=1) / np.sqrt(len(s)))


def ibp_sizes(dec: Decomposition, t: float, reps: int, seed: int) -> np.ndarray:
    """``|W~_t|`` samples from a single root."""
    return _size_batch(np.uint64(rng.derive_seed(seed, rng.STREAM_DUAL, 13)), int(reps),
                       dec.total_rate, dec.n, float(t))


def bep_group_counts(dec: Decomposition, torus: Torus, E, t: float, reps: int, seed: int) -> np.ndarray:
    """``|W_t|`` samples (number of alive groups) for the BEP from ``E``."""
    torus.check_radius(dec.m)
    sites = np.array([torus.index(u) for u in E], dtype=np.int64)
    return _bep_group_batch(np.uint64(rng.derive_seed(seed, rng.STREAM_DUAL, 14)), int(reps),
                            dec.total_rate, torus.N, torus.neighbor_table(),
                            torus.ball_table(dec.m), float(2 * torus.d * torus.L ** 2), sites,
                            float(t))
