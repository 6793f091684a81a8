"""Flip-rate tables, monotone decompositions and the reaction polynomial.

A flip-rate function ``c`` on ``{-1,1}^B`` (``B`` the canonical ball) is
stored as a :class:`LocalRateTable`.  Attractive tables are written as a
non-negative combination of increasing boolean updates::

    c(x) = sum_i rate_i * 1{ f_i(x) == -x(center) }

which is what the graphical constructions execute.  The reaction
polynomial ``R(rho) = E[-2 xi_0 c(xi)]`` under the product Rademacher(rho)
law drives the hydrodynamic ODE and the regime classification.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import boolean
from .errors import (
    BallTooLarge,
    BoundarySignViolation,
    ConfigurationError,
    InternalConsistencyError,
    NotAttractive,
    NotMonotone,
    ParameterOutOfRange,
    SupportIndicatorNotMonotone,
)
from .lattice import all_windows, ball_size, center_position

MAX_BALL = 20


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class LocalRateTable:
    """Strictly positive flip rates indexed by local window code."""

    m: int
    d: int
    rates: np.ndarray
    allow_zero: bool = False  # only for boundary members of a family, e.g. De Masi at gamma = 1

    def __post_init__(self):
        n = ball_size(self.m, self.d)
        if n > MAX_BALL:
            raise BallTooLarge(f"|B(0,m)| = {n} exceeds {MAX_BALL}")
        rates = np.asarray(self.rates, dtype=np.float64).copy()
        if rates.shape != (1 << n,):
            raise ConfigurationError(f"rate table must have {1 << n} entries")
        floor_ok = rates >= 0 if self.allow_zero else rates > 0
        if not np.all(np.isfinite(rates)) or not np.all(floor_ok):
            raise ConfigurationError("flip rates must be finite and strictly positive")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def n(self) -> int:
        return ball_size(self.m, self.d)

    @property
    def center(self) -> int:
        return center_position(self.m, self.d)

    def rate(self, window: Sequence[int]) -> float:
        from .lattice import encode_window

        return float(self.rates[encode_window(window)])

    def __eq__(self, other):
        return (
            isinstance(other, LocalRateTable)
            and self.m == other.m
            and self.d == other.d
            and np.array_equal(self.rates, other.rates)
        )


@dataclass(frozen=True, eq=False)
class BooleanUpdate:
    """An increasing boolean function on the local window."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.int8).copy()
        boolean.n_vars(t)
        if not np.all((t == 1) | (t == -1)):
            raise ConfigurationError("boolean update values must be +-1")
        if not boolean.is_increasing(t):
            raise NotMonotone("boolean update is not increasing")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def n(self) -> int:
        return boolean.n_vars(self.table)

    @property
    def is_constant(self) -> bool:
        return boolean.is_constant(self.table)

    @property
    def pivotal_mask(self) -> int:
        return boolean.pivotal_mask(self.table)

    def __call__(self, window: Sequence[int]) -> int:
        from .lattice import encode_window

        return int(self.table[encode_window(window)])

    def __eq__(self, other):
        return isinstance(other, BooleanUpdate) and np.array_equal(self.table, other.table)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Weighted increasing updates; entries 0 and 1 are the constants +1 and -1."""

    m: int
    d: int
    entries: tuple

    def __post_init__(self):
        entries = tuple((float(lam), f if isinstance(f, BooleanUpdate) else BooleanUpdate(f))
                        for lam, f in self.entries)
        if len(entries) < 2:
            raise ConfigurationError("a decomposition needs the two oblivious entries")
        n = ball_size(self.m, self.d)
        for lam, f in entries:
            if not (lam > 0 and math.isfinite(lam)):
                raise ConfigurationError("decomposition rates must be positive")
            if f.n != n:
                raise ConfigurationError("update arity does not match the ball")
        if not np.all(entries[0][1].table == 1):
            raise ConfigurationError("first update must be the constant +1")
        if not np.all(entries[1][1].table == -1):
            raise ConfigurationError("second update must be the constant -1")
        object.__setattr__(self, "entries", entries)

    @property
    def q(self) -> int:
        return len(self.entries)

    @property
    def n(self) -> int:
        return ball_size(self.m, self.d)

    @property
    def rates(self) -> np.ndarray:
        return np.array([lam for lam, _ in self.entries], dtype=np.float64)

    @property
    def tables(self) -> np.ndarray:
        return np.stack([f.table for _, f in self.entries]).astype(np.int8)

    @property
    def total_rate(self) -> float:
        return float(sum(lam for lam, _ in self.entries))

    @property
    def refresh_bias(self) -> float:
        """Mean of the refresh spin, (rate_1 - rate_2) / (rate_1 + rate_2)."""
        l1, l2 = self.entries[0][0], self.entries[1][0]
        return (l1 - l2) / (l1 + l2)

    def oblivious_mask(self) -> np.ndarray:
        return np.array([f.is_constant for _, f in self.entries])

    def summary(self) -> dict:
        return {
            "q": self.q,
            "total_rate": self.total_rate,
            "refresh_bias": self.refresh_bias,
            "rates": [lam for lam, _ in self.entries],
            "pivotal_masks": [f.pivotal_mask for _, f in self.entries],
        }


@dataclass(frozen=True)
class ReactionPolynomial:
    """Coefficients of R in increasing degree."""

    coeffs: tuple

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def deriv_coeffs(self) -> tuple:
        return tuple(k * c for k, c in enumerate(self.coeffs))[1:] or (0.0,)

    def __call__(self, rho):
        return np.polynomial.polynomial.polyval(rho, self.coeffs)

    def derivative(self, rho):
        return np.polynomial.polynomial.polyval(rho, self.deriv_coeffs)

    def max_abs_derivative(self, grid: int = 2001) -> float:
        r = np.linspace(-1.0, 1.0, grid)
        return float(np.max(np.abs(self.derivative(r))))


@dataclass(frozen=True)
class RegimeReport:
    roots: tuple  # of (root, tangential: bool)
    regime: str  # "High" | "Critical" | "Low"
    slope: Optional[float]

    @property
    def root(self) -> float:
        if len(self.roots) != 1:
            raise ConfigurationError("no unique root outside the High/Critical regimes")
        return self.roots[0][0]


# ---------------------------------------------------------------------------
# attractiveness and decomposition
# ---------------------------------------------------------------------------
def check_attractive(c: LocalRateTable) -> list:
    """All comparable pairs (lower_code, upper_code) that break attractiveness.

    Pairs differ in exactly one non-center coordinate.  With center +1 the
    rate must not increase along the pair; with center -1 it must not
    decrease.
    """
    n, ctr = c.n, c.center
    rates = c.rates
    violations = []
    for code in range(1 << n):
        plus_center = (code >> ctr) & 1
        for j in range(n):
            if j == ctr or (code >> j) & 1:
                continue
            up = code | (1 << j)
            if plus_center and rates[up] > rates[code]:
                violations.append((code, up))
            elif not plus_center and rates[up] < rates[code]:
                violations.append((code, up))
    return violations


def _exact_integers(values: np.ndarray):
    """Scale dyadic floats to exact integers with a shared power-of-two denominator."""
    ratios = [Fraction(float(v)) for v in values]
    denom = 1
    for r in ratios:
        denom = max(denom, r.denominator)
    return [int(r * denom) for r in ratios], denom


def _peel(values: list, down_set: bool, n_free: int) -> list:
    """Greedy layer peeling of a non-negative monotone integer function.

    Returns a list of (weight, support indicator as bool array).  ``down_set``
    selects the order for which the function is monotone (decreasing).
    """
    h = list(values)
    layers = []
    while True:
        support = [k for k, v in enumerate(h) if v > 0]
        if not support:
            return layers
        lam = min(h[k] for k in support)
        indicator = np.zeros(len(h), dtype=bool)
        indicator[support] = True
        # an up-set (or down-set) indicator is the only admissible layer
        check = np.where(indicator, 1, -1).astype(np.int8)
        if down_set:
            check = -check
        if not boolean.is_increasing(check):
            raise SupportIndicatorNotMonotone("peeled support is not monotone")
        for k in support:
            h[k] -= lam
        layers.append((lam, indicator))


def decompose(c: LocalRateTable) -> Decomposition:
    """Greedy monotone decomposition of an attractive rate table.

    The center = -1 slice is increasing in the other coordinates and the
    center = +1 slice is decreasing; each slice is peeled into weighted
    support indicators (minimum over the current support, subtracted in
    exact dyadic arithmetic).  A layer ``S`` of the center = -1 slice lifts
    to ``f = +1`` when the center is +1 and ``f = 2*1_S - 1`` otherwise; a
    layer of the center = +1 slice lifts to ``f = -1`` when the center is -1
    and ``f = 1 - 2*1_S`` otherwise.  Since every rate is positive, the
    first layer of each slice is the full support, giving the constants.
    """
    if np.any(c.rates <= 0):
        raise ConfigurationError("decomposition needs strictly positive rates")
    if check_attractive(c):
        raise NotAttractive("rate table violates attractiveness")
    n, ctr = c.n, c.center
    codes = np.arange(1 << n)
    plus = (codes >> ctr) & 1 == 1
    ints, denom = _exact_integers(c.rates)
    minus_codes = codes[~plus]
    plus_codes = codes[plus]
    # slices are indexed by the codes with the center bit set to 0 / 1
    minus_layers = _peel([ints[k] for k in minus_codes], down_set=False, n_free=n - 1)
    plus_layers = _peel([ints[k] for k in plus_codes], down_set=True, n_free=n - 1)

    def lift_minus(indicator):
        f = np.ones(1 << n, dtype=np.int8)
        f[minus_codes] = np.where(indicator, 1, -1)
        return f

    def lift_plus(indicator):
        f = -np.ones(1 << n, dtype=np.int8)
        f[plus_codes] = np.where(indicator, -1, 1)
        return f

    def check_slice_monotone(f):
        if not boolean.is_increasing(f):
            raise SupportIndicatorNotMonotone("lifted layer is not increasing")
        return f

    entries = []
    first_minus, first_plus = minus_layers[0], plus_layers[0]
    if not (first_minus[1].all() and first_plus[1].all()):
        raise InternalConsistencyError("first layers must cover every vector")
    entries.append((float(Fraction(first_minus[0], denom)), lift_minus(first_minus[1])))
    entries.append((float(Fraction(first_plus[0], denom)), lift_plus(first_plus[1])))
    for lam, ind in minus_layers[1:]:
        entries.append((float(Fraction(lam, denom)), check_slice_monotone(lift_minus(ind))))
    for lam, ind in plus_layers[1:]:
        entries.append((float(Fraction(lam, denom)), check_slice_monotone(lift_plus(ind))))
    return Decomposition(m=c.m, d=c.d, entries=tuple(entries))


def recompose(dec: Decomposition) -> LocalRateTable:
    """Rate table ``c(x) = sum_i rate_i 1{f_i(x) = -x(center)}``."""
    n = dec.n
    ctr = center_position(dec.m, dec.d)
    codes = np.arange(1 << n)
    center_spin = np.where((codes >> ctr) & 1 == 1, 1, -1)
    rates = np.zeros(1 << n, dtype=np.float64)
    for lam, f in dec.entries:
        rates += lam * (f.table == -center_spin)
    return LocalRateTable(m=dec.m, d=dec.d, rates=rates)


# ---------------------------------------------------------------------------
# reaction polynomial
# ---------------------------------------------------------------------------
def _product_weight_basis(n: int) -> np.ndarray:
    """Row k: coefficients of ((1+r)/2)^k ((1-r)/2)^(n-k) in increasing degree."""
    P = np.polynomial.polynomial
    up, down = np.array([0.5, 0.5]), np.array([0.5, -0.5])
    basis = np.zeros((n + 1, n + 1))
    for k in range(n + 1):
        poly = np.array([1.0])
        for _ in range(k):
            poly = P.polymul(poly, up)
        for _ in range(n - k):
            poly = P.polymul(poly, down)
        basis[k, : len(poly)] = poly
    return basis


def reaction_polynomial(c: LocalRateTable) -> ReactionPolynomial:
    """Exact coefficients of ``R(rho) = E_rho[-2 xi_0 c(xi)]``.

    The product weight of a vector depends only on its number ``k`` of +1
    entries, so contributions are accumulated per ``k`` and then expanded
    by coefficient convolution.
    """
    n = c.n
    if n > MAX_BALL:
        raise BallTooLarge(f"|B(0,m)| = {n} exceeds {MAX_BALL}")
    codes = np.arange(1 << n)
    ones = np.array([bin(k).count("1") for k in codes]) if n <= 12 else _popcount(codes)
    center = np.where((codes >> c.center) & 1 == 1, 1.0, -1.0)
    contrib = -2.0 * center * c.rates
    per_k = np.bincount(ones, weights=contrib, minlength=n + 1)
    coeffs = per_k @ _product_weight_basis(n)
    coeffs[np.abs(coeffs) < 1e-15 * max(1.0, np.max(np.abs(coeffs)))] = 0.0
    return ReactionPolynomial(tuple(coeffs))


def _popcount(codes: np.ndarray) -> np.ndarray:
    out = np.zeros_like(codes)
    x = codes.copy()
    while np.any(x):
        out += x & 1
        x >>= 1
    return out


def reaction_via_decomposition(dec: Decomposition, rho: float) -> tuple:
    """``(R(rho), R'(rho))`` from the decomposition by enumeration.

    ``R = sum_i rate_i E[f_i] - total_rate * rho`` and
    ``R' = sum_i rate_i sum_j E[(f_i(x^{j,+}) - f_i(x^{j,-}))/2] - total_rate``.
    """
    n = dec.n
    windows = all_windows(n).astype(np.float64)
    weights = np.prod((1.0 + windows * rho) / 2.0, axis=1)
    codes = np.arange(1 << n)
    value = 0.0
    slope = 0.0
    for lam, f in dec.entries:
        t = f.table.astype(np.float64)
        value += lam * float(weights @ t)
        for j in range(n):
            grad = t[codes | (1 << j)] - t[codes & ~(1 << j)]
            slope += lam * 0.5 * float(weights @ grad)
    lam_total = dec.total_rate
    return value - lam_total * rho, slope - lam_total


# ---------------------------------------------------------------------------
# root isolation and regimes
# ---------------------------------------------------------------------------
def _trim(coeffs) -> np.ndarray:
    c = np.array(coeffs, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(c)))) if len(c) else 1.0
    while len(c) > 1 and abs(c[-1]) <= 1e-14 * scale:
        c = c[:-1]
    return c


def _bisect(coeffs, a: float, b: float, fa: float) -> float:
    P = np.polynomial.polynomial
    for _ in range(200):
        mid = 0.5 * (a + b)
        fm = P.polyval(mid, coeffs)
        if fm == 0.0:
            return mid
        if (fm > 0) == (fa > 0):
            a, fa = mid, fm
        else:
            b = mid
        if b - a <= 1e-15:
            break
    return 0.5 * (a + b)


def _real_roots(coeffs, a: float, b: float, tol: float) -> list:
    """Roots in [a, b] as (root, tangential) pairs via derivative-separated subdivision."""
    P = np.polynomial.polynomial
    c = _trim(coeffs)
    if len(c) == 1:
        return []
    if len(c) == 2:
        r = -c[0] / c[1]
        return [(r, False)] if a - 1e-12 <= r <= b + 1e-12 else []
    crit = [r for r, _ in _real_roots(P.polyder(c), a, b, tol)]
    knots = sorted(set([a] + [r for r in crit if a < r < b] + [b]))
    found = []
    for lo, hi in zip(knots[:-1], knots[1:]):
        flo, fhi = P.polyval(lo, c), P.polyval(hi, c)
        if flo == 0.0:
            found.append((lo, None))
        if (flo > 0 and fhi < 0) or (flo < 0 and fhi > 0):
            found.append((_bisect(c, lo, hi, flo), False))
    if P.polyval(b, c) == 0.0:
        found.append((b, None))
    for r in crit:
        if abs(P.polyval(r, c)) < tol:
            found.append((r, None))
    found.sort()
    merged = []
    for r, flag in found:
        if merged and abs(r - merged[-1][0]) < 1e-7:
            merged[-1] = (merged[-1][0], merged[-1][1] or flag)
            continue
        merged.append((r, flag))
    out = []
    for r, flag in merged:
        if flag is None and (r <= a or r >= b):
            # only one side is visible at an endpoint: use the slope instead
            flag = abs(P.polyval(r, P.polyder(c))) <= tol
        elif flag is None:
            # root sitting on a knot: tangential iff the sign does not change
            eps = 1e-6
            left = P.polyval(max(a, r - eps), c)
            right = P.polyval(min(b, r + eps), c)
            flag = not ((left > 0 and right < 0) or (left < 0 and right > 0))
        out.append((float(r), bool(flag)))
    return out


def classify_regime(p: ReactionPolynomial, tol: float = 1e-9) -> RegimeReport:
    """High / Critical / Low classification of a reaction polynomial."""
    # zeros at the boundary only occur for families whose rates vanish at an
    # endpoint (De Masi at gamma = 1); they count as roots
    if not p(-1.0) >= 0 or not p(1.0) <= 0:
        raise BoundarySignViolation("R(-1) must be non-negative and R(1) non-positive")
    roots = _real_roots(p.coeffs, -1.0, 1.0, tol)
    if not roots:
        raise InternalConsistencyError("a sign change must produce a root")
    if len(roots) >= 2:
        return RegimeReport(roots=tuple(roots), regime="Low", slope=None)
    rho_star = roots[0][0]
    slope = float(p.derivative(rho_star))
    if abs(slope) <= tol:
        regime = "Critical"
    elif slope < 0:
        regime = "High"
    else:
        raise InternalConsistencyError("unique root with positive slope")
    return RegimeReport(roots=tuple(roots), regime=regime, slope=slope)


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------
def _table_from_exact(m: int, d: int, func, allow_zero: bool = False) -> LocalRateTable:
    n = ball_size(m, d)
    rates = [float(func(tuple(int(s) for s in w))) for w in all_windows(n)]
    return LocalRateTable(m=m, d=d, rates=np.array(rates), allow_zero=allow_zero)


def _as_fraction(value) -> Fraction:
    """Exact parameter value; floats that round-trip a small fraction become that fraction."""
    if isinstance(value, (Fraction, int, str)):
        return Fraction(value)
    approx = Fraction(value).limit_denominator(10 ** 6)
    return approx if float(approx) == value else Fraction(value)


def builtin_demasi(gamma) -> LocalRateTable:
    """``c(x) = 1 - g x(0)(x(1) + x(-1)) + g^2 x(1) x(-1)`` on d = 1, m = 1."""
    g = _as_fraction(gamma)
    if not 0 <= g <= 1:
        raise ParameterOutOfRange("gamma must lie in [0, 1]")
    return _table_from_exact(1, 1, lambda w: 1 - g * w[1] * (w[2] + w[0]) + g * g * w[2] * w[0],
                             allow_zero=(g == 1))


def builtin_theta(theta) -> LocalRateTable:
    """``c(x) = theta + 2 * 1{x(0) = +1, x(1) = -1}`` on d = 1, m = 1."""
    t = _as_fraction(theta)
    if not t > 0:
        raise ParameterOutOfRange("theta must be positive")
    return _table_from_exact(1, 1, lambda w: t + (2 if (w[1] == 1 and w[2] == -1) else 0))


def builtin_constant(m: int = 1, d: int = 1) -> LocalRateTable:
    """The constant rate ``c = 1``."""
    if m < 0 or d not in (1, 2):
        raise ParameterOutOfRange("need m >= 0 and d in {1, 2}")
    n = ball_size(m, d)
    if n > MAX_BALL:
        raise BallTooLarge(f"|B(0,m)| = {n} exceeds {MAX_BALL}")
    return LocalRateTable(m=m, d=d, rates=np.ones(1 << n))


def demasi_majority_decomposition(gamma) -> Decomposition:
    """Five-function decomposition: constants, majority of three, and the two neighbours.

    Rates: constants ``(1-g)^2`` each, majority ``4 g^2``, each neighbour
    dictator ``2(g - g^2)``; entries with zero rate are dropped.
    """
    g = _as_fraction(gamma)
    if not 0 <= g < 1:
        raise ParameterOutOfRange("gamma must lie in [0, 1) for this decomposition")
    windows = all_windows(3)
    majority = np.sign(windows.sum(axis=1)).astype(np.int8)
    left = windows[:, 0].copy()
    right = windows[:, 2].copy()
    entries = [
        (float((1 - g) ** 2), np.ones(8, dtype=np.int8)),
        (float((1 - g) ** 2), -np.ones(8, dtype=np.int8)),
    ]
    for lam, f in ((4 * g * g, majority), (2 * (g - g * g), left), (2 * (g - g * g), right)):
        if lam > 0:
            entries.append((float(lam), f))
    return Decomposition(m=1, d=1, entries=tuple(entries))


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Model:
    """A rate table together with the decomposition used to simulate it."""

    kind: str
    table: LocalRateTable
    decomposition: Decomposition
    params: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.table.m

    @property
    def d(self) -> int:
        return self.table.d

    def reaction(self) -> ReactionPolynomial:
        return reaction_polynomial(self.table)

    def regime(self, tol: float = 1e-9) -> RegimeReport:
        return classify_regime(self.reaction(), tol)

    def to_dict(self) -> dict:
        out = {"d": self.d, "m": self.m, "kind": self.kind}
        out.update(self.params)
        if self.kind == "table":
            out["rates"] = [float(r) for r in self.table.rates]
        return out


def make_model(kind: str, *, gamma=None, theta=None, m: int = 1, d: int = 1,
               rates=None, decomposition: str = "default") -> Model:
    """Build a model.  ``decomposition`` is ``"greedy"`` or ``"default"``.

    The default for the De Masi family is the five-function decomposition
    (smaller total clock rate); every other model uses the greedy one.
    """
    if kind == "demasi":
        if gamma is None:
            raise ConfigurationError("demasi needs gamma")
        table = builtin_demasi(gamma)
        params = {"gamma": float(gamma)}
        if decomposition == "default" and _as_fraction(gamma) < 1:
            dec = demasi_majority_decomposition(gamma)
        else:
            dec = decompose(table)
    elif kind == "theta":
        if theta is None:
            raise ConfigurationError("theta model needs theta")
        table = builtin_theta(theta)
        params = {"theta": float(theta)}
        dec = decompose(table)
    elif kind == "constant":
        table = builtin_constant(m, d)
        params = {}
        dec = decompose(table)
    elif kind == "table":
        if rates is None:
            raise ConfigurationError("table model needs rates")
        table = LocalRateTable(m=m, d=d, rates=np.asarray(rates, dtype=np.float64))
        params = {}
        dec = decompose(table)
    else:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    if decomposition not in ("default", "greedy"):
        raise ConfigurationError("decomposition must be 'default' or 'greedy'")
    return Model(kind=kind, table=table, decomposition=dec, params=params)


def model_from_dict(data: dict) -> Model:
    kind = data.get("kind")
    if kind is None:
        raise ConfigurationError("model needs a 'kind'")
    d = int(data.get("d", 1))
    m = int(data.get("m", 1))
    if kind in ("demasi", "theta") and (d, m) != (1, 1):
        raise ConfigurationError(f"{kind} model is defined for d=1, m=1")
    return make_model(kind, gamma=data.get("gamma"), theta=data.get("theta"), m=m, d=d,
                      rates=data.get("rates"))


def load_model(path) -> Model:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid model file: {exc}") from exc
    return model_from_dict(data)
