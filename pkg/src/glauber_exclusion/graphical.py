"""Poisson mark streams and the forward evolution they drive.

Stream layout
-------------
Marks are generated on a *skeleton* of site marks (Glauber or refresh,
total rate ``lam * N``).  Between consecutive skeleton times the number
of edge marks is Poisson with mean ``edge_rate * gap``; their edges and
their timestamps come from two further substreams:

* skeleton substream: gap, edge-mark count, type, site (in that order);
* edge substream: one edge index per edge mark, in draw order;
* timestamp substream: for skeleton gap ``g`` a fresh generator keyed by
  ``g`` draws the uniform positions of that gap's edge marks; the ``k``-th
  drawn edge is assigned to the ``k``-th smallest timestamp.

Because timestamps are keyed by gap the fused kernel (:func:`run_forward`)
can skip them entirely except in gaps that contain a snapshot time, and
still reproduce the materialised stream bit for bit.

Auxiliary draws (refresh spins, fair coins) are keyed by the global mark
index in time order, so every coupled copy reads the same values.

Several configurations evolve together packed into the bits of one
``uint8`` per site: bits 0..6 are spin copies (set = +1) and bit 7 is
membership in the independent-site set ``Z``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import rng
from .errors import (
    ConfigurationError,
    ConstructionMismatch,
    DeskScaleExceeded,
    DimensionUnsupported,
    InternalConsistencyError,
    MarkCollision,
)
from .flip_model import Decomposition
from .lattice import Torus

EXCLUSION = 0
GLAUBER = 1
REFRESH = 2
BLACK = 3
BLUE = 4
KIND_NAMES = ("exclusion", "glauber", "refresh", "black", "blue")

CONSTRUCTIONS = {"GC1": 1, "GC2": 2, "GC3": 3}
Z_BIT = 7
MAX_COPIES = 7
DESK_LIMITS = {1: 512, 2: 64}
MAX_MATERIALISED = 20_000_000

# counter slots used by the kernels
_C_MIXED = 8
_C_Z = 9
_C_ORDER = 10
_C_REOPEN = 11
_C_COALESCED = 12
_C_NMARKS = 13
_N_COUNTERS = 14


def check_desk_scale(torus: Torus, force: bool = False) -> None:
    limit = DESK_LIMITS.get(torus.d)
    if not force and (limit is None or torus.L > limit):
        raise DeskScaleExceeded(
            f"L={torus.L} in d={torus.d} exceeds the desk-scale limit; pass force to override")


def _construction_code(construction: str) -> int:
    try:
        return CONSTRUCTIONS[construction]
    except KeyError:
        raise ConfigurationError(f"unknown construction {construction!r}") from None


# ---------------------------------------------------------------------------
# auxiliary randomness
# ---------------------------------------------------------------------------
@njit(cache=True)
def _keyed_doubles(key, idx):
    out = np.empty(len(idx))
    for j in range(len(idx)):
        out[j] = rng.keyed_double(key, idx[j])
    return out


@dataclass(frozen=True)
class AuxRandomness:
    """Refresh spins and fair coins indexed by mark identity."""

    seed: int
    refresh_bias: float

    @property
    def key(self) -> int:
        return rng.derive_seed(self.seed, rng.STREAM_AUX)

    @property
    def p_plus(self) -> float:
        return 0.5 * (1.0 + self.refresh_bias)

    def uniform(self, mark_index) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(mark_index, dtype=np.int64))
        return _keyed_doubles(np.uint64(self.key), idx)

    def rademacher(self, mark_index) -> np.ndarray:
        return np.where(self.uniform(mark_index) < self.p_plus, 1, -1).astype(np.int8)

    def coin(self, mark_index) -> np.ndarray:
        return self.uniform(mark_index) < 0.5

    @classmethod
    def for_stream(cls, ms: "MarkStream", dec: Decomposition) -> "AuxRandomness":
        return cls(seed=ms.seed, refresh_bias=dec.refresh_bias)


# ---------------------------------------------------------------------------
# shared kernel pieces
# ---------------------------------------------------------------------------
@njit(cache=True, inline="always")
def _categorical(s, cum):
    u = rng.next_double(s) * cum[len(cum) - 1]
    i = 0
    while i < len(cum) - 1 and cum[i] <= u:
        i += 1
    return i


@njit(cache=True)
def _gap_timestamps(time_key, g, k, t, end):
    st = rng.seeded_state_nb(rng.keyed_u64(time_key, g))
    ts = np.empty(k)
    span = end - t
    for j in range(k):
        ts[j] = t + rng.next_double(st) * span
    return ts


@njit(cache=True, inline="always")
def _mixed(byte, full):
    v = byte & full
    return 1 if (v != 0 and v != full) else 0


@njit(cache=True, inline="always")
def _account(ctr, before, after, nbits, full):
    for b in range(nbits):
        ctr[b] += ((after >> b) & 1) - ((before >> b) & 1)
    ctr[_C_MIXED] += _mixed(after, full) - _mixed(before, full)
    ctr[_C_Z] += ((after >> Z_BIT) & 1) - ((before >> Z_BIT) & 1)


@njit(cache=True)
def _apply_site_mark(state, kind, typ, u, mark_idx, nbits, full, use_z, ball_tab, tables,
                     aux_key, p_plus, ctr, check_order):
    before = state[u]
    if kind == REFRESH:
        if rng.keyed_double(aux_key, mark_idx) < p_plus:
            after = (before & ~full) | full
        else:
            after = before & ~full
        if use_z:
            after = after | (1 << Z_BIT)
    else:
        nb = ball_tab.shape[1]
        after = before & ~full
        for b in range(nbits):
            code = 0
            for j in range(nb):
                code |= ((state[ball_tab[u, j]] >> b) & 1) << j
            if tables[typ, code] == 1:
                after |= 1 << b
        if use_z:
            for j in range(nb):
                v = ball_tab[u, j]
                if v != u and (state[v] >> Z_BIT) & 1:
                    old = state[v]
                    state[v] = old & ~(1 << Z_BIT)
                    _account(ctr, old, state[v], nbits, full)
            after = after & ~(1 << Z_BIT)
    state[u] = after
    _account(ctr, before, after, nbits, full)
    if check_order:
        v = after & full
        if (v >> 1) & ~v & (full >> 1):
            ctr[_C_ORDER] += 1
    if ctr[_C_MIXED] == 0:
        ctr[_C_COALESCED] = 1
    elif ctr[_C_COALESCED] == 1:
        ctr[_C_REOPEN] += 1
        ctr[_C_COALESCED] = 0


@njit(cache=True, inline="always")
def _apply_edge(state, edge_tab, e):
    a = edge_tab[e, 0]
    b = edge_tab[e, 1]
    va = state[a]
    state[a] = state[b]
    state[b] = va


@njit(cache=True)
def _record(state, ctr, j, nbits, counts, mixed, zc, states, record_states):
    for b in range(nbits):
        counts[j, b] = ctr[b]
    mixed[j] = ctr[_C_MIXED]
    zc[j] = ctr[_C_Z]
    if record_states:
        states[j, :] = state


@njit(cache=True)
def _init_counters(state, nbits, full):
    ctr = np.zeros(_N_COUNTERS, dtype=np.int64)
    for u in range(len(state)):
        _account(ctr, np.uint8(0), state[u], nbits, full)
    # _account measured the change from an empty byte; mixed(0) = 0 so this is the count
    if ctr[_C_MIXED] == 0:
        ctr[_C_COALESCED] = 1
    return ctr


# ---------------------------------------------------------------------------
# materialised streams
# ---------------------------------------------------------------------------
@njit(cache=True)
def _grow(arr, n):
    out = np.empty(max(2 * len(arr), n), dtype=arr.dtype)
    out[: len(arr)] = arr
    return out


@njit(cache=True)
def _generate_kernel(T, n_sites, n_edges, edge_mult, cum, site_rate, edge_rate, construction,
                     skel, edges, time_key):
    cap = 1024
    times = np.empty(cap)
    kinds = np.empty(cap, dtype=np.int8)
    locs = np.empty(cap, dtype=np.int64)
    pays = np.empty(cap, dtype=np.int16)
    n = 0
    t = 0.0
    g = 0
    while True:
        t_next = t + rng.next_exponential(skel, site_rate)
        end = min(t_next, T)
        k = rng.next_poisson(skel, edge_rate * (end - t))
        if n + k + 1 > len(times):
            need = n + k + 1
            times = _grow(times, need)
            kinds = _grow(kinds, need)
            locs = _grow(locs, need)
            pays = _grow(pays, need)
        if k > 0:
            ts = _gap_timestamps(time_key, g, k, t, end)
            ts.sort()
            for j in range(k):
                r = rng.next_below(edges, n_edges * edge_mult)
                times[n] = ts[j]
                if edge_mult == 1:
                    kinds[n] = EXCLUSION
                    locs[n] = r
                else:
                    kinds[n] = BLACK if r % 3 == 0 else BLUE
                    locs[n] = r // 3
                pays[n] = -1
                n += 1
        if t_next > T:
            break
        i = _categorical(skel, cum)
        u = rng.next_below(skel, n_sites)
        times[n] = t_next
        if construction >= 2 and i < 2:
            kinds[n] = REFRESH
            pays[n] = -1
        else:
            kinds[n] = GLAUBER
            pays[n] = i
        locs[n] = u
        n += 1
        t = t_next
        g += 1
    return times[:n].copy(), kinds[:n].copy(), locs[:n].copy(), pays[:n].copy()


@dataclass(frozen=True, eq=False)
class MarkStream:
    """A finite collection of marks on ``torus x [0, T]`` in time order.

    ``payloads`` holds the Glauber type index (position in the
    decomposition) and -1 for every other kind.
    """

    torus: Torus
    m: int
    construction: str
    T: float
    seed: int
    times: np.ndarray
    kinds: np.ndarray
    locations: np.ndarray
    payloads: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    def counts(self) -> dict:
        return {name: int(np.sum(self.kinds == k)) for k, name in enumerate(KIND_NAMES)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "kind", "location", "payload"])
        for t, k, loc, p in zip(self.times, self.kinds, self.locations, self.payloads):
            w.writerow([repr(float(t)), KIND_NAMES[k], int(loc), int(p)])
        return buf.getvalue()

    @classmethod
    def from_marks(cls, torus: Torus, m: int, construction: str, T: float, marks,
                   seed: int = 0) -> "MarkStream":
        """Hand-built stream from ``(time, kind, location, payload)`` tuples."""
        marks = sorted(marks, key=lambda r: r[0])
        times = np.array([r[0] for r in marks], dtype=np.float64)
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise MarkCollision("mark times must be strictly increasing")
        if len(times) and (times[0] <= 0 or times[-1] > T):
            raise ConfigurationError("mark times must lie in (0, T]")
        _construction_code(construction)
        return cls(torus=torus, m=m, construction=construction, T=float(T), seed=seed,
                   times=times,
                   kinds=np.array([r[1] for r in marks], dtype=np.int8),
                   locations=np.array([r[2] for r in marks], dtype=np.int64),
                   payloads=np.array([r[3] for r in marks], dtype=np.int16))


def _stream_parameters(torus: Torus, dec: Decomposition, construction: str):
    code = _construction_code(construction)
    if dec.d != torus.d:
        raise ConfigurationError("decomposition dimension does not match the torus")
    torus.check_radius(dec.m)
    edge_mult = 3 if code == 3 else 1
    return dict(
        n_sites=torus.N,
        n_edges=torus.n_edges,
        edge_mult=edge_mult,
        cum=np.cumsum(dec.rates),
        site_rate=dec.total_rate * torus.N,
        edge_rate=float(edge_mult * torus.n_edges * torus.L ** 2),
        construction=code,
    )


def expected_mark_count(torus: Torus, dec: Decomposition, T: float, construction: str = "GC1"):
    p = _stream_parameters(torus, dec, construction)
    return T * (p["edge_rate"] + p["site_rate"])


def generate_marks(torus: Torus, dec: Decomposition, construction: str, T: float, seed: int,
                   force: bool = False) -> MarkStream:
    """Sample the marks of a graphical construction on ``[0, T]``."""
    if not T > 0:
        raise ConfigurationError("horizon must be positive")
    check_desk_scale(torus, force)
    p = _stream_parameters(torus, dec, construction)
    if expected_mark_count(torus, dec, T, construction) > MAX_MATERIALISED and not force:
        raise DeskScaleExceeded("stream too large to materialise; use run_forward")
    times, kinds, locs, pays = _generate_kernel(
        float(T), p["n_sites"], p["n_edges"], p["edge_mult"], p["cum"], p["site_rate"],
        p["edge_rate"], p["construction"],
        rng.stream_state(seed, rng.STREAM_SKELETON), rng.stream_state(seed, rng.STREAM_EDGES),
        np.uint64(rng.derive_seed(seed, rng.STREAM_TIMES)))
    if len(times) > 1 and not np.all(np.diff(times) > 0):
        raise MarkCollision("two marks share a timestamp")
    return MarkStream(torus=torus, m=dec.m, construction=construction, T=float(T), seed=int(seed),
                      times=times, kinds=kinds, locations=locs, payloads=pays)


# ---------------------------------------------------------------------------
# evolution kernels
# ---------------------------------------------------------------------------
@njit(cache=True)
def _evolve_stream_kernel(state, nbits, use_z, times, kinds, locs, pays, snaps, edge_tab,
                          ball_tab, tables, aux_key, p_plus, record_states, check_order,
                          counts, mixed, zc, states):
    full = (1 << nbits) - 1
    ctr = _init_counters(state, nbits, full)
    j = 0
    n_snap = len(snaps)
    for idx in range(len(times)):
        while j < n_snap and snaps[j] < times[idx]:
            _record(state, ctr, j, nbits, counts, mixed, zc, states, record_states)
            j += 1
        k = kinds[idx]
        if k == EXCLUSION:
            _apply_edge(state, edge_tab, locs[idx])
        else:
            _apply_site_mark(state, k, pays[idx], locs[idx], idx, nbits, full, use_z, ball_tab,
                             tables, aux_key, p_plus, ctr, check_order)
    while j < n_snap:
        _record(state, ctr, j, nbits, counts, mixed, zc, states, record_states)
        j += 1
    return ctr


@njit(cache=True)
def _forward_kernel(state, nbits, use_z, T, snaps, n_sites, n_edges, cum, site_rate, edge_rate,
                    construction, edge_tab, ball_tab, tables, skel, edges, time_key, aux_key,
                    p_plus, record_states, check_order, counts, mixed, zc, states):
    full = (1 << nbits) - 1
    ctr = _init_counters(state, nbits, full)
    n_snap = len(snaps)
    j = 0
    t = 0.0
    g = 0
    idx = 0
    while True:
        t_next = t + rng.next_exponential(skel, site_rate)
        end = min(t_next, T)
        k = rng.next_poisson(skel, edge_rate * (end - t))
        applied = 0
        have_ts = False
        ts = np.empty(0)
        while j < n_snap and snaps[j] < t_next:
            if k > 0 and not have_ts:
                ts = _gap_timestamps(time_key, g, k, t, end)
                have_ts = True
            c = 0
            for x in ts:
                if x <= snaps[j]:
                    c += 1
            while applied < c:
                _apply_edge(state, edge_tab, rng.next_below(edges, n_edges))
                applied += 1
            _record(state, ctr, j, nbits, counts, mixed, zc, states, record_states)
            j += 1
        while applied < k:
            _apply_edge(state, edge_tab, rng.next_below(edges, n_edges))
            applied += 1
        idx += k
        if t_next > T:
            break
        i = _categorical(skel, cum)
        u = rng.next_below(skel, n_sites)
        if construction >= 2 and i < 2:
            _apply_site_mark(state, REFRESH, -1, u, idx, nbits, full, use_z, ball_tab, tables,
                             aux_key, p_plus, ctr, check_order)
        else:
            _apply_site_mark(state, GLAUBER, i, u, idx, nbits, full, use_z, ball_tab, tables,
                             aux_key, p_plus, ctr, check_order)
        idx += 1
        t = t_next
        g += 1
    ctr[_C_NMARKS] = idx
    return ctr


# ---------------------------------------------------------------------------
# packing helpers and results
# ---------------------------------------------------------------------------
def pack(configs: Sequence[np.ndarray], z: Optional[np.ndarray] = None) -> np.ndarray:
    configs = [np.asarray(x) for x in configs]
    if len(configs) > MAX_COPIES:
        raise ConfigurationError(f"at most {MAX_COPIES} coupled copies")
    n = len(configs[0]) if configs else len(z)
    state = np.zeros(n, dtype=np.uint8)
    for b, x in enumerate(configs):
        if x.shape != (n,):
            raise ConfigurationError("all configurations must live on the same torus")
        if not np.all((x == 1) | (x == -1)):
            raise ConfigurationError("spins must be +-1")
        state |= ((x == 1).astype(np.uint8) << b)
    if z is not None:
        z = np.asarray(z).astype(bool)
        if z.shape != (n,):
            raise ConfigurationError("Z must be a 0/1 table over the sites")
        state |= z.astype(np.uint8) << Z_BIT
    return state


def unpack_spins(state: np.ndarray, b: int) -> np.ndarray:
    return np.where((state >> b) & 1, 1, -1).astype(np.int8)


def unpack_z(state: np.ndarray) -> np.ndarray:
    return ((state >> Z_BIT) & 1).astype(bool)


@dataclass(frozen=True, eq=False)
class ForwardResult:
    """Outcome of a coupled forward run.

    ``plus_counts[j, b]`` is the number of +1 spins of copy ``b`` at
    ``times[j]``; ``mixed[j]`` the number of sites where the copies
    disagree; ``z_size[j]`` the size of ``Z``.
    """

    times: np.ndarray
    n_copies: int
    final_state: np.ndarray
    plus_counts: np.ndarray
    mixed: np.ndarray
    z_size: np.ndarray
    states: Optional[np.ndarray]
    order_violations: int
    reopened: int
    n_marks: int

    def spins(self, j: int, b: int = 0) -> np.ndarray:
        if self.states is None:
            raise ConfigurationError("states were not recorded")
        return unpack_spins(self.states[j], b)

    def final_spins(self, b: int = 0) -> np.ndarray:
        return unpack_spins(self.final_state, b)

    def magnetization(self, b: int = 0) -> np.ndarray:
        n = len(self.final_state)
        return 2 * self.plus_counts[:, b] - n


def _snapshot_grid(times, T: float) -> np.ndarray:
    if times is None:
        return np.zeros(0)
    snaps = np.asarray(times, dtype=np.float64).reshape(-1)
    if len(snaps) and (np.any(np.diff(snaps) < 0) or snaps[0] < 0 or snaps[-1] > T):
        raise ConfigurationError("snapshot times must be sorted and lie in [0, T]")
    return snaps


def _outputs(n_snap, nbits, N, record_states):
    return (np.zeros((n_snap, max(nbits, 1)), dtype=np.int64), np.zeros(n_snap, dtype=np.int64),
            np.zeros(n_snap, dtype=np.int64),
            np.zeros((n_snap if record_states else 0, N), dtype=np.uint8))


def _ordered(configs) -> bool:
    return all(np.all(configs[b] >= configs[b + 1]) for b in range(len(configs) - 1))


def run_forward(torus: Torus, dec: Decomposition, construction: str, T: float, seed: int,
                initials: Sequence[np.ndarray], z0: Optional[np.ndarray] = None, times=None,
                record_states: bool = False, check_order: Optional[bool] = None,
                force: bool = False) -> ForwardResult:
    """Fused generate-and-evolve on the stream :func:`generate_marks` would produce.

    Never materialises the stream; results are identical to
    :func:`evolve_packed` on ``generate_marks(torus, dec, construction, T, seed)``.
    """
    if construction not in ("GC1", "GC2"):
        raise ConstructionMismatch("forward evolution runs on GC1 or GC2 streams")
    if z0 is not None and construction != "GC2":
        raise ConstructionMismatch("the independent-site process needs a GC2 stream")
    if not T > 0:
        raise ConfigurationError("horizon must be positive")
    check_desk_scale(torus, force)
    p = _stream_parameters(torus, dec, construction)
    state = pack(initials, z0)
    nbits = len(initials)
    if check_order is None:
        check_order = nbits > 1 and _ordered(initials)
    snaps = _snapshot_grid(times, T)
    counts, mixed, zc, states = _outputs(len(snaps), nbits, torus.N, record_states)
    ctr = _forward_kernel(
        state, nbits, z0 is not None, float(T), snaps, p["n_sites"], p["n_edges"], p["cum"],
        p["site_rate"], p["edge_rate"], p["construction"], torus.edge_endpoints(),
        torus.ball_table(dec.m), dec.tables, rng.stream_state(seed, rng.STREAM_SKELETON),
        rng.stream_state(seed, rng.STREAM_EDGES), np.uint64(rng.derive_seed(seed, rng.STREAM_TIMES)),
        np.uint64(rng.derive_seed(seed, rng.STREAM_AUX)), 0.5 * (1 + dec.refresh_bias),
        record_states, bool(check_order), counts, mixed, zc, states)
    return ForwardResult(times=snaps, n_copies=nbits, final_state=state, plus_counts=counts,
                         mixed=mixed, z_size=zc, states=states if record_states else None,
                         order_violations=int(ctr[_C_ORDER]), reopened=int(ctr[_C_REOPEN]),
                         n_marks=int(ctr[_C_NMARKS]))


def evolve_packed(ms: MarkStream, aux: AuxRandomness, dec: Decomposition,
                  initials: Sequence[np.ndarray], z0: Optional[np.ndarray] = None, times=None,
                  record_states: bool = False, check_order: Optional[bool] = None) -> ForwardResult:
    """Evolve coupled copies (and optionally ``Z``) through a materialised stream."""
    if ms.construction == "GC3":
        raise ConstructionMismatch("GC3 streams only drive the averaging process")
    if z0 is not None and ms.construction != "GC2":
        raise ConstructionMismatch("the independent-site process needs a GC2 stream")
    if dec.m != ms.m or dec.d != ms.torus.d:
        raise ConfigurationError("decomposition does not match the stream")
    glauber_types = ms.payloads[ms.kinds == GLAUBER]
    if len(glauber_types) and glauber_types.max() >= dec.q:
        raise ConstructionMismatch("stream references an update type the decomposition lacks")
    if ms.construction == "GC2" and np.any(glauber_types < 2):
        raise ConstructionMismatch("GC2 streams carry refresh marks instead of constant updates")
    if ms.construction == "GC1" and np.any(ms.kinds == REFRESH):
        raise ConstructionMismatch("GC1 streams carry no refresh marks")
    state = pack(initials, z0)
    nbits = len(initials)
    if check_order is None:
        check_order = nbits > 1 and _ordered(initials)
    snaps = _snapshot_grid(times, ms.T)
    counts, mixed, zc, states = _outputs(len(snaps), nbits, ms.torus.N, record_states)
    ctr = _evolve_stream_kernel(
        state, nbits, z0 is not None, ms.times, ms.kinds, ms.locations, ms.payloads, snaps,
        ms.torus.edge_endpoints(), ms.torus.ball_table(ms.m), dec.tables, np.uint64(aux.key),
        aux.p_plus, record_states, bool(check_order), counts, mixed, zc, states)
    return ForwardResult(times=snaps, n_copies=nbits, final_state=state, plus_counts=counts,
                         mixed=mixed, z_size=zc, states=states if record_states else None,
                         order_violations=int(ctr[_C_ORDER]), reopened=int(ctr[_C_REOPEN]),
                         n_marks=len(ms))


# ---------------------------------------------------------------------------
# public operations on materialised streams
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Evolution:
    final: np.ndarray
    times: np.ndarray
    snapshots: Optional[np.ndarray]


def evolve(x0, ms: MarkStream, aux: AuxRandomness, dec: Decomposition, times=None) -> Evolution:
    """Evolve one configuration; optionally record it at ``times``."""
    x0 = np.asarray(x0)
    if x0.shape != (ms.torus.N,):
        raise ConfigurationError("configuration does not match the stream's torus")
    res = evolve_packed(ms, aux, dec, [x0], times=times, record_states=times is not None)
    snaps = None
    if res.states is not None:
        snaps = np.stack([unpack_spins(s, 0) for s in res.states]) if len(res.states) else \
            np.zeros((0, ms.torus.N), dtype=np.int8)
    return Evolution(final=res.final_spins(0), times=res.times, snapshots=snaps)


@dataclass(frozen=True, eq=False)
class CoupledTrajectories:
    """Copies driven by one stream.

    ``agreement[j]`` marks the sites where all copies agree at ``times[j]``;
    ``coalesced[j]`` says whether they agree everywhere.
    """

    times: np.ndarray
    finals: np.ndarray
    configs: np.ndarray  # (n_times, n_copies, N)
    agreement: np.ndarray
    coalesced: np.ndarray
    order_violations: int
    reopened: int


def grand_coupling(ms: MarkStream, aux: AuxRandomness, dec: Decomposition, initials,
                   times=None) -> CoupledTrajectories:
    """Evolve every initial configuration with the same marks and auxiliary draws.

    When the initials are ordered (first largest) the order is checked after
    every mark; ``order_violations`` counts failures.
    """
    initials = [np.asarray(x) for x in initials]
    if not initials:
        raise ConfigurationError("need at least one initial configuration")
    if times is None:
        times = [ms.T]
    res = evolve_packed(ms, aux, dec, initials, times=times, record_states=True)
    k = len(initials)
    configs = np.stack([np.stack([unpack_spins(s, b) for b in range(k)]) for s in res.states])
    agreement = np.all(configs == configs[:, :1, :], axis=1)
    finals = np.stack([res.final_spins(b) for b in range(k)])
    return CoupledTrajectories(times=res.times, finals=finals, configs=configs,
                               agreement=agreement, coalesced=res.mixed == 0,
                               order_violations=res.order_violations, reopened=res.reopened)


@dataclass(frozen=True, eq=False)
class ZTrajectory:
    times: np.ndarray
    sets: np.ndarray  # (n_times, N) booleans
    final: np.ndarray


def z_process(z0, ms: MarkStream, times=None) -> ZTrajectory:
    """Independent-site process: exclusion moves membership, refresh adds, Glauber clears the ball."""
    if ms.construction != "GC2":
        raise ConstructionMismatch("the independent-site process needs a GC2 stream")
    z0 = np.asarray(z0).astype(bool)
    if z0.shape != (ms.torus.N,):
        raise ConfigurationError("Z must be a 0/1 table over the sites")
    if times is None:
        times = [ms.T]
    snaps = _snapshot_grid(times, ms.T)
    n_snap = len(snaps)
    state = pack([], z0)
    counts, mixed, zc, states = _outputs(n_snap, 0, ms.torus.N, True)
    tables = np.ones((max(int(ms.payloads.max(initial=0)) + 1, 1), 1 << len(
        ms.torus.ball_table(ms.m)[0])), dtype=np.int8)
    _evolve_stream_kernel(state, 0, True, ms.times, ms.kinds, ms.locations, ms.payloads, snaps,
                          ms.torus.edge_endpoints(), ms.torus.ball_table(ms.m), tables,
                          np.uint64(0), 0.5, True, False, counts, mixed, zc, states)
    return ZTrajectory(times=snaps, sets=np.stack([unpack_z(s) for s in states])
                       if n_snap else np.zeros((0, ms.torus.N), bool), final=unpack_z(state))


@dataclass(frozen=True, eq=False)
class RegionSnapshot:
    """Partition of the sites at time ``t``: disagreement, independent sites, rest."""

    t: float
    red: np.ndarray
    blue: np.ndarray
    green: np.ndarray
    spins_plus: np.ndarray

    def __post_init__(self):
        total = self.red.astype(int) + self.blue.astype(int) + self.green.astype(int)
        if not np.all(total == 1):
            raise InternalConsistencyError("regions must partition the sites")

    @property
    def sizes(self) -> tuple:
        return int(self.red.sum()), int(self.blue.sum()), int(self.green.sum())

    def region_labels(self) -> np.ndarray:
        return np.where(self.red, "red", np.where(self.blue, "blue", "green"))


def regions(ms: MarkStream, aux: AuxRandomness, dec: Decomposition, times) -> list:
    """Red/Blue/Green snapshots from the extreme coupled copies and ``Z`` started empty."""
    if ms.construction != "GC2":
        raise ConstructionMismatch("regions need a GC2 stream")
    n = ms.torus.N
    res = evolve_packed(ms, aux, dec, [np.ones(n, np.int8), -np.ones(n, np.int8)],
                        z0=np.zeros(n, bool), times=times, record_states=True)
    return [_region_snapshot(t, s) for t, s in zip(res.times, res.states)]


def _region_snapshot(t, state) -> RegionSnapshot:
    plus = unpack_spins(state, 0)
    minus = unpack_spins(state, 1)
    red = plus != minus
    blue = unpack_z(state)
    if np.any(red & blue):
        raise InternalConsistencyError("an independent site disagrees across initial conditions")
    return RegionSnapshot(t=float(t), red=red, blue=blue, green=~red & ~blue, spins_plus=plus)


def regions_to_csv(snapshots, header: str = "") -> str:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "site", "spin", "region"])
    for snap in snapshots:
        for u, (s, r) in enumerate(zip(snap.spins_plus, snap.region_labels())):
            w.writerow([f"{snap.t:.12g}", u, int(s), r])
    return buf.getvalue()


def region_sizes(torus: Torus, dec: Decomposition, T: float, seed: int, times,
                 force: bool = False) -> np.ndarray:
    """``(|Red|, |Blue|, |Green|)`` at each time, via the fused kernel (no stream kept)."""
    n = torus.N
    res = run_forward(torus, dec, "GC2", T, seed, [np.ones(n, np.int8), -np.ones(n, np.int8)],
                      z0=np.zeros(n, bool), times=times, force=force)
    red = res.mixed
    blue = res.z_size
    return np.stack([red, blue, n - red - blue], axis=1)


# ---------------------------------------------------------------------------
# BAD windows and the averaging process
# ---------------------------------------------------------------------------
def bad_window_length(L: int, beta2: float) -> int:
    return int(math.ceil(beta2 * math.log(L) - 1e-9))


def is_bad(z, torus: Torus, beta2: Optional[float] = None, window: Optional[int] = None) -> bool:
    """True iff some tile of the fixed tiling by windows of length ``ceil(beta2 log L)`` misses ``z``.

    Tiles are ``[l w, (l+1) w - 1]`` for ``0 <= l <= ceil(L / w)``, read modulo ``L``.
    """
    if torus.d != 1:
        raise DimensionUnsupported("the BAD set is defined on the one-dimensional torus only")
    if (beta2 is None) == (window is None):
        raise ConfigurationError("give exactly one of beta2 and window")
    w = window if window is not None else bad_window_length(torus.L, beta2)
    if w < 1:
        raise ConfigurationError("window length must be at least 1")
    z = np.asarray(z).astype(bool)
    if z.shape != (torus.N,):
        raise ConfigurationError("Z must be a 0/1 table over the sites")
    L = torus.L
    for tile in range(-(-L // w) + 1):
        idx = (np.arange(tile * w, (tile + 1) * w)) % L
        if not z[idx].any():
            return True
    return False


@dataclass(frozen=True, eq=False)
class AveragingTrajectory:
    """``||H_t||_2^2`` after every mark that changed ``H`` (and at time 0)."""

    times: np.ndarray
    l2sq: np.ndarray
    final: np.ndarray


def averaging_process(ms: MarkStream, origin: int, z0=None) -> AveragingTrajectory:
    """Mass function of a tagged perturbation walker given a GC3 stream.

    ``Z`` starts from ``z0`` plus the origin (default: the origin alone).
    Refresh zeroes the site and adds it to ``Z``; a Glauber mark zeroes the
    ball and removes it from ``Z``; a black mark swaps both ``Z`` and ``H``
    unless both endpoints are in ``Z``; a blue mark averages ``H`` over its
    endpoints when both are in ``Z``.
    """
    if ms.construction != "GC3":
        raise ConstructionMismatch("the averaging process runs on GC3 streams")
    torus = ms.torus
    origin = torus.index(origin)
    z = np.zeros(torus.N, bool) if z0 is None else np.asarray(z0).astype(bool).copy()
    z[origin] = True
    h = np.zeros(torus.N)
    h[origin] = 1.0
    edges = torus.edge_endpoints()
    balls = torus.ball_table(ms.m)
    times = [0.0]
    norms = [1.0]
    for t, k, loc in zip(ms.times, ms.kinds, ms.locations):
        changed = False
        if k == REFRESH:
            changed = h[loc] != 0
            h[loc] = 0.0
            z[loc] = True
        elif k == GLAUBER:
            ball = balls[loc]
            changed = bool(np.any(h[ball] != 0))
            h[ball] = 0.0
            z[ball] = False
        elif k == BLACK:
            a, b = edges[loc]
            if not (z[a] and z[b]):
                z[a], z[b] = z[b], z[a]
                changed = h[a] != h[b]
                h[a], h[b] = h[b], h[a]
        elif k == BLUE:
            a, b = edges[loc]
            if z[a] and z[b] and h[a] != h[b]:
                h[a] = h[b] = 0.5 * (h[a] + h[b])
                changed = True
        else:
            raise ConstructionMismatch("exclusion marks do not occur in GC3 streams")
        if changed:
            times.append(float(t))
            norms.append(float(np.dot(h, h)))
    return AveragingTrajectory(times=np.array(times), l2sq=np.array(norms), final=h)
