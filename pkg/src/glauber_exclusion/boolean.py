"""Truth-table utilities for boolean functions on {-1,1}^n.

A function is stored as an ``int8`` array of length ``2**n`` indexed by the
window code of :mod:`glauber_exclusion.lattice` (bit ``j`` set iff argument
``j`` equals +1).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def n_vars(table: np.ndarray) -> int:
    size = len(table)
    n = size.bit_length() - 1
    if size != 1 << n:
        raise ValueError("truth table length must be a power of two")
    return n


def is_increasing(table: np.ndarray) -> bool:
    """True iff every single-coordinate up-flip never decreases the value."""
    table = np.asarray(table)
    n = n_vars(table)
    codes = np.arange(len(table))
    for j in range(n):
        low = codes[(codes >> j) & 1 == 0]
        if np.any(table[low | (1 << j)] < table[low]):
            return False
    return True


def pivotal_mask(table: np.ndarray) -> int:
    """Bit mask of the pivotal coordinates of a monotone function.

    Coordinate ``j`` is pivotal iff flipping it changes the value for some
    assignment of the other coordinates.
    """
    table = np.asarray(table)
    n = n_vars(table)
    codes = np.arange(len(table))
    mask = 0
    for j in range(n):
        low = codes[(codes >> j) & 1 == 0]
        if np.any(table[low | (1 << j)] != table[low]):
            mask |= 1 << j
    return mask


def is_constant(table: np.ndarray) -> bool:
    return bool(np.all(table == table[0]))


def extremes_say_nonconstant(table: np.ndarray) -> bool:
    """For a monotone function, non-constant iff f(+..+) = +1 and f(-..-) = -1."""
    return bool(table[-1] == 1 and table[0] == -1)


# Child states used by the restricted-pivot tables.
FREE = 0
CONST_PLUS = 1
CONST_MINUS = 2


def state_code(states) -> int:
    """Base-3 code of a vector of child states (FREE / CONST_PLUS / CONST_MINUS)."""
    code = 0
    for j, s in enumerate(states):
        code += int(s) * 3 ** j
    return code


def restriction_tables(tables: np.ndarray):
    """Restricted pivot masks and constant values for every function.

    For function ``i`` and a base-3 code describing which arguments are
    fixed to constants (and to which value), returns

    * ``piv[i, code]``: bit mask of the free arguments that are pivotal for
      the restricted function;
    * ``val[i, code]``: the restricted function's value when it is constant
      (``piv == 0``), otherwise 0.
    """
    tables = np.asarray(tables, dtype=np.int8)
    key = (tables.shape, tables.tobytes())
    return _restriction_tables_cached(key)


@lru_cache(maxsize=64)
def _restriction_tables_cached(key):
    shape, raw = key
    tables = np.frombuffer(raw, dtype=np.int8).reshape(shape)
    q, size = tables.shape
    n = size.bit_length() - 1
    n_codes = 3 ** n
    piv = np.zeros((q, n_codes), dtype=np.int64)
    val = np.zeros((q, n_codes), dtype=np.int8)
    all_codes = np.arange(size)
    for code in range(n_codes):
        states = [(code // 3 ** j) % 3 for j in range(n)]
        fixed_mask = 0
        fixed_bits = 0
        for j, s in enumerate(states):
            if s != FREE:
                fixed_mask |= 1 << j
                if s == CONST_PLUS:
                    fixed_bits |= 1 << j
        consistent = all_codes[(all_codes & fixed_mask) == fixed_bits]
        for i in range(q):
            t = tables[i]
            mask = 0
            for j in range(n):
                if fixed_mask >> j & 1:
                    continue
                low = consistent[(consistent >> j) & 1 == 0]
                if np.any(t[low | (1 << j)] != t[low]):
                    mask |= 1 << j
            piv[i, code] = mask
            val[i, code] = 0 if mask else t[consistent[0]]
    piv.setflags(write=False)
    val.setflags(write=False)
    return piv, val
