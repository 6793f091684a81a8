"""Pinned pseudo-random generators and counter-based seed derivation.

Everything random in the package flows from a 64-bit master seed through
:func:`derive_seed`, so results are a pure function of ``(seed, keys)`` and
do not depend on worker count or completion order.

Format contract (stable across versions)::

    mix(x)            = splitmix64 finaliser of x + 0x9E3779B97F4A7C15
    derive_seed(s, k1, ..., kn):
        h = mix(s)
        for k in keys: h = mix(h ^ mix(k))
        return h

Generators are xoshiro256** seeded by four successive splitmix64 outputs of
the derived seed.  Generator state is a ``uint64[4]`` array.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

U_GOLDEN = np.uint64(_GOLDEN)
U_M1 = np.uint64(_M1)
U_M2 = np.uint64(_M2)
U_MASK32 = np.uint64(0xFFFFFFFF)
U_TWO32 = np.uint64(1 << 32)
U_ONE = np.uint64(1)
U_ZERO = np.uint64(0)
INV_2_53 = 1.0 / 9007199254740992.0

# Substream keys.  Adding a key never changes existing streams.
STREAM_SKELETON = 1
STREAM_EDGES = 2
STREAM_TIMES = 3
STREAM_AUX = 4
STREAM_INITIAL = 5
STREAM_REPLICA = 6
STREAM_DUAL = 7
STREAM_WALK = 8
STREAM_BOOTSTRAP = 9


# -- pure Python reference (used for seed derivation) -------------------------
def mix64(x: int) -> int:
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Counter-based derivation of a child seed from a master seed and integer keys."""
    h = mix64(int(seed) & MASK64)
    for k in keys:
        h = mix64(h ^ mix64(int(k) & MASK64))
    return h


def new_state(seed: int) -> np.ndarray:
    """Fresh xoshiro256** state from a 64-bit seed."""
    st = np.zeros(4, dtype=np.uint64)
    x = int(seed) & MASK64
    for i in range(4):
        st[i] = mix64(x)
        x = (x + _GOLDEN) & MASK64
    if not st.any():
        st[0] = 1
    return st


def stream_state(seed: int, *keys: int) -> np.ndarray:
    return new_state(derive_seed(seed, *keys))


# -- numba kernels ------------------------------------------------------------
@njit(cache=True, inline="always")
def mix64_nb(x):
    z = x + U_GOLDEN
    z = (z ^ (z >> np.uint64(30))) * U_M1
    z = (z ^ (z >> np.uint64(27))) * U_M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True, inline="always")
def next_u64(s):
    s0 = s[0]
    s1 = s[1]
    s2 = s[2]
    s3 = s[3]
    result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
    t = s1 << np.uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3
    return result


@njit(cache=True, inline="always")
def next_double(s):
    """Uniform on [0, 1) with 53 random bits."""
    return float(next_u64(s) >> np.uint64(11)) * INV_2_53


@njit(cache=True, inline="always")
def next_below(s, n):
    """Unbiased integer in [0, n) for 1 <= n < 2**32.

    Multiply-shift on the high 32 bits of one 64-bit draw, with rejection of
    the biased low range.
    """
    un = np.uint64(n)
    m = (next_u64(s) >> np.uint64(32)) * un
    low = m & U_MASK32
    if low < un:
        threshold = (U_TWO32 - un) % un
        while low < threshold:
            m = (next_u64(s) >> np.uint64(32)) * un
            low = m & U_MASK32
    return np.int64(m >> np.uint64(32))


@njit(cache=True)
def next_exponential(s, rate):
    return -math.log1p(-next_double(s)) / rate


@njit(cache=True)
def next_poisson(s, mean):
    """Poisson variate: multiplication method below 10, PTRS transformed rejection above."""
    if mean <= 0.0:
        return 0
    if mean < 10.0:
        limit = math.exp(-mean)
        k = 0
        prod = next_double(s)
        while prod > limit:
            k += 1
            prod *= next_double(s)
        return k
    slam = math.sqrt(mean)
    loglam = math.log(mean)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    while True:
        u = next_double(s) - 0.5
        v = next_double(s)
        us = 0.5 - abs(u)
        k = math.floor((2.0 * a / us + b) * u + mean + 0.43)
        if us >= 0.07 and v <= vr:
            return np.int64(k)
        if k < 0 or (us < 0.013 and v > us):
            continue
        if (math.log(v) + math.log(invalpha) - math.log(a / (us * us) + b)
                <= -mean + k * loglam - math.lgamma(k + 1.0)):
            return np.int64(k)


@njit(cache=True)
def seeded_state_nb(seed):
    st = np.zeros(4, dtype=np.uint64)
    x = seed
    for i in range(4):
        st[i] = mix64_nb(x)
        x = x + U_GOLDEN
    if st[0] == U_ZERO and st[1] == U_ZERO and st[2] == U_ZERO and st[3] == U_ZERO:
        st[0] = U_ONE
    return st


@njit(cache=True, inline="always")
def keyed_u64(key, counter):
    """Counter-based draw: the same ``(key, counter)`` always gives the same 64 bits."""
    return mix64_nb(key ^ mix64_nb(np.uint64(counter)))


@njit(cache=True, inline="always")
def keyed_double(key, counter):
    return float(keyed_u64(key, counter) >> np.uint64(11)) * INV_2_53
