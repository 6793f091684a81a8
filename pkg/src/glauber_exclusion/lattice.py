"""Torus geometry, spin configurations and local windows.

Sites are stored as a single integer ``u = sum_i coords[i] * L**i``.  In
``d = 1`` the index and the coordinate coincide; in ``d = 2`` public
functions accept either an index or a coordinate tuple and answer in the
same form they were given.

Canonical ball order (used to index every local table in the package):

* ``d = 1``: offsets ``-m, ..., -1, 0, 1, ..., m``.
* ``d >= 2``: offsets sorted by L1 length, ties broken by comparing the
  offset tuples lexicographically (axis 0 first).  For ``m = 1, d = 2``
  this gives ``(0,0), (-1,0), (0,-1), (0,1), (1,0)``.

A local spin vector is encoded as the integer ``sum_j [s_j == +1] << j``
where ``j`` is the position in canonical ball order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from .errors import ConfigurationError, RadiusTooLarge

Site = Union[int, tuple]


@lru_cache(maxsize=None)
def ball_offsets(m: int, d: int) -> tuple:
    """Offsets of ``B(0, m)`` in canonical order, as tuples of length ``d``."""
    if m < 0:
        raise ConfigurationError("radius must be non-negative")
    if d == 1:
        return tuple((k,) for k in range(-m, m + 1))
    offs = [
        off
        for off in itertools.product(range(-m, m + 1), repeat=d)
        if sum(abs(c) for c in off) <= m
    ]
    offs.sort(key=lambda off: (sum(abs(c) for c in off), off))
    return tuple(offs)


def ball_size(m: int, d: int) -> int:
    return len(ball_offsets(m, d))


def center_position(m: int, d: int) -> int:
    """Position of the zero offset inside the canonical ball order."""
    return ball_offsets(m, d).index((0,) * d)


def encode_window(spins: Sequence[int]) -> int:
    """Integer code of a local spin vector (bit j set iff spin j is +1)."""
    code = 0
    for j, s in enumerate(spins):
        if s == 1:
            code |= 1 << j
        elif s != -1:
            raise ConfigurationError(f"spin values must be +-1, got {s}")
    return code


def decode_window(code: int, n: int) -> np.ndarray:
    """Inverse of :func:`encode_window` for vectors of length ``n``."""
    return np.array([1 if (code >> j) & 1 else -1 for j in range(n)], dtype=np.int8)


def all_windows(n: int) -> np.ndarray:
    """Matrix of shape ``(2**n, n)`` whose row ``k`` decodes code ``k``."""
    codes = np.arange(1 << n, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n)) & 1
    return (2 * bits - 1).astype(np.int8)


@dataclass(frozen=True)
class Torus:
    """The discrete torus ``(Z/LZ)^d``."""

    d: int
    L: int

    def __post_init__(self):
        if self.d < 1:
            raise ConfigurationError("dimension must be >= 1")
        if self.L < 1:
            raise ConfigurationError("side length must be >= 1")

    @property
    def N(self) -> int:
        return self.L ** self.d

    @property
    def n_edges(self) -> int:
        return self.d * self.N

    # -- encoding -----------------------------------------------------
    def index(self, u: Site) -> int:
        if isinstance(u, (tuple, list, np.ndarray)):
            if len(u) != self.d:
                raise ConfigurationError(f"site {u!r} has wrong dimension")
            idx = 0
            for i, c in enumerate(u):
                idx += (int(c) % self.L) * self.L ** i
            return idx
        u = int(u)
        if self.d == 1:
            return u % self.L
        if not 0 <= u < self.N:
            raise ConfigurationError(f"site index {u} out of range")
        return u

    def coords(self, u: Site) -> tuple:
        if isinstance(u, (tuple, list, np.ndarray)):
            return tuple(int(c) % self.L for c in u)
        u = self.index(u)
        return tuple((u // self.L ** i) % self.L for i in range(self.d))

    def _present(self, idx: int, like: Site):
        if isinstance(like, (tuple, list, np.ndarray)) and self.d >= 1:
            return self.coords(idx)
        return idx

    def shift(self, u: Site, offset: Sequence[int]) -> int:
        c = self.coords(u)
        return self.index(tuple(ci + oi for ci, oi in zip(c, offset)))

    # -- geometry -----------------------------------------------------
    def neighbors(self, u: Site) -> list:
        """The ``2d`` neighbours of ``u``: axis by axis, ``+1`` before ``-1``."""
        out = []
        for axis in range(self.d):
            for step in (1, -1):
                off = [0] * self.d
                off[axis] = step
                out.append(self._present(self.shift(u, off), u))
        return out

    def check_radius(self, m: int) -> None:
        if 2 * m + 1 > self.L:
            raise RadiusTooLarge(f"ball of radius {m} does not fit in L={self.L}")

    def ball(self, u: Site, m: int) -> list:
        """Sites of ``B(u, m)`` in canonical order."""
        self.check_radius(m)
        return [self._present(self.shift(u, off), u) for off in ball_offsets(m, self.d)]

    def distance(self, u: Site, v: Site) -> int:
        cu, cv = self.coords(u), self.coords(v)
        total = 0
        for a, b in zip(cu, cv):
            delta = abs(a - b)
            total += min(delta, self.L - delta)
        return total

    # -- tables used by the simulation kernels ---------------------------
    def ball_table(self, m: int) -> np.ndarray:
        """Array ``(N, |B|)`` whose row ``u`` lists ``ball(u, m)`` as indices."""
        self.check_radius(m)
        return _ball_table(self.d, self.L, m).copy()

    def edge_endpoints(self) -> np.ndarray:
        """Array ``(d*N, 2)``; edge ``u*d + axis`` joins ``u`` and ``u + e_axis``."""
        return _edge_table(self.d, self.L).copy()

    def neighbor_table(self) -> np.ndarray:
        """Array ``(N, 2d)`` of neighbour indices in :meth:`neighbors` order."""
        return _neighbor_table(self.d, self.L).copy()


@lru_cache(maxsize=32)
def _ball_table(d: int, L: int, m: int) -> np.ndarray:
    coords = np.indices((L,) * d).reshape(d, -1)[::-1].T  # row u -> coords of u
    weights = L ** np.arange(d)
    offs = np.array(ball_offsets(m, d))
    table = ((coords[:, None, :] + offs[None, :, :]) % L) @ weights
    table = table.astype(np.int64)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=32)
def _edge_table(d: int, L: int) -> np.ndarray:
    N = L ** d
    coords = np.indices((L,) * d).reshape(d, -1)[::-1].T
    weights = L ** np.arange(d)
    out = np.empty((d * N, 2), dtype=np.int64)
    for axis in range(d):
        step = np.zeros(d, dtype=np.int64)
        step[axis] = 1
        out[axis::d, 0] = np.arange(N)
        out[axis::d, 1] = ((coords + step) % L) @ weights
    out.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def _neighbor_table(d: int, L: int) -> np.ndarray:
    N = L ** d
    coords = np.indices((L,) * d).reshape(d, -1)[::-1].T
    weights = L ** np.arange(d)
    cols = []
    for axis in range(d):
        for step in (1, -1):
            off = np.zeros(d, dtype=np.int64)
            off[axis] = step
            cols.append(((coords + off) % L) @ weights)
    out = np.stack(cols, axis=1).astype(np.int64)
    out.setflags(write=False)
    return out


def as_spin_config(x, torus: Torus) -> np.ndarray:
    """Validate and copy a spin configuration into an ``int8`` array of length N."""
    arr = np.asarray(x)
    if arr.shape != (torus.N,):
        arr = arr.reshape(-1)
        if arr.shape != (torus.N,):
            raise ConfigurationError(f"configuration must have {torus.N} sites")
    if not np.all((arr == 1) | (arr == -1)):
        raise ConfigurationError("spins must be +-1")
    return arr.astype(np.int8).copy()


def all_plus(torus: Torus) -> np.ndarray:
    return np.ones(torus.N, dtype=np.int8)


def all_minus(torus: Torus) -> np.ndarray:
    return -np.ones(torus.N, dtype=np.int8)


def local_window(x: np.ndarray, u: Site, m: int, torus: Torus) -> np.ndarray:
    """Restriction of ``x`` to ``ball(u, m)`` in canonical order."""
    torus.check_radius(m)
    idx = _ball_table(torus.d, torus.L, m)[torus.index(u)]
    return np.asarray(x)[idx].astype(np.int8)
