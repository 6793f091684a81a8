"""Mean-field ODE ``rho' = R(rho)`` and the survival curves built from it.

Besides the ODE solution itself this module provides

* :func:`derived_functions`: the survival probability ``phi`` and the
  conditional mean ``theta`` of the dual branching process, obtained from
  the two extreme solutions ``rho_plus`` (start at +1) and ``rho_minus``
  (start at -1);
* :func:`pivotal_recursion_curves`: the same curves plus the mean pivotal
  mass ``psi``, computed instead from the branching recursion of the
  decomposition (an independent route used to cross-check both the ODE
  identities and the Monte Carlo estimators);
* :func:`fit_decay_rate`: least-squares exponential decay rates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import boolean
from .errors import ConfigurationError, DivisionNearZero, NonPositiveValue, StepTooLarge
from .flip_model import Decomposition, ReactionPolynomial


@dataclass(frozen=True, eq=False)
class OdeSolution:
    times: np.ndarray
    values: np.ndarray
    step: float

    def at(self, t):
        """Linear interpolation between grid nodes."""
        return np.interp(t, self.times, self.values)


@dataclass(frozen=True, eq=False)
class DerivedFunctions:
    times: np.ndarray
    rho_plus: np.ndarray
    rho_minus: np.ndarray
    phi: np.ndarray
    theta: np.ndarray

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "rho_plus", "rho_minus", "phi", "theta"])
        for row in zip(self.times, self.rho_plus, self.rho_minus, self.phi, self.theta):
            w.writerow([f"{v:.12g}" for v in row])
        return buf.getvalue()


def _grid(T: float, h: float):
    if h <= 0:
        raise ConfigurationError("step must be positive")
    if T < 0:
        raise ConfigurationError("horizon must be non-negative")
    n = int(round(T / h))
    if n == 0 and T > 0:
        n = 1
    if n > 0 and abs(n * h - T) > 1e-9 * max(1.0, T):
        n = int(np.ceil(T / h))
    step = T / n if n else h
    return n, step


def solve_ode(p: ReactionPolynomial, rho0: float, T: float, h: float = 1e-3) -> OdeSolution:
    """Classical fourth-order Runge-Kutta on a uniform grid over ``[0, T]``."""
    if not -1.0 <= rho0 <= 1.0:
        raise ConfigurationError("initial density must lie in [-1, 1]")
    if h * p.max_abs_derivative() > 0.5:
        raise StepTooLarge("step times max |R'| exceeds 0.5")
    n, step = _grid(T, h)
    coeffs = np.asarray(p.coeffs)
    P = np.polynomial.polynomial
    out = np.empty(n + 1)
    out[0] = rho = float(rho0)
    max_r = float(np.max(np.abs(p(np.linspace(-1, 1, 201)))))
    for k in range(n):
        k1 = P.polyval(rho, coeffs)
        k2 = P.polyval(rho + 0.5 * step * k1, coeffs)
        k3 = P.polyval(rho + 0.5 * step * k2, coeffs)
        k4 = P.polyval(rho + step * k3, coeffs)
        rho = rho + step * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if abs(rho) > 1.0:
            if abs(rho) - 1.0 > 10 * step * max_r:
                raise StepTooLarge("integration left [-1, 1]")
            rho = float(np.clip(rho, -1.0, 1.0))
        out[k + 1] = rho
    return OdeSolution(times=np.linspace(0.0, n * step, n + 1), values=out, step=step)


def derived_functions(p: ReactionPolynomial, T: float, h: float = 1e-3) -> DerivedFunctions:
    """``phi = (rho_plus - rho_minus)/2`` and ``theta = (rho_plus + rho_minus)/(2(1 - phi))``.

    ``theta`` is 0/0 at ``t = 0``; it is set to its value at the first grid node.
    """
    plus = solve_ode(p, 1.0, T, h)
    minus = solve_ode(p, -1.0, T, h)
    phi = 0.5 * (plus.values - minus.values)
    denom = 1.0 - phi
    theta = np.empty_like(phi)
    if len(phi) > 1 and np.any(denom[1:] < 1e-12):
        raise DivisionNearZero("1 - phi vanishes at a positive time; refine the grid")
    theta[1:] = 0.5 * (plus.values[1:] + minus.values[1:]) / denom[1:]
    theta[0] = theta[1] if len(theta) > 1 else 0.0
    return DerivedFunctions(times=plus.times, rho_plus=plus.values, rho_minus=minus.values,
                            phi=phi, theta=theta)


@dataclass(frozen=True, eq=False)
class RecursionCurves:
    """Survival curves of the pivotal set from the branching recursion."""

    times: np.ndarray
    phi: np.ndarray  # P(pivotal set non-empty)
    theta: np.ndarray  # mean root spin given extinction
    psi: np.ndarray  # mean pivotal set size
    const_plus: np.ndarray
    const_minus: np.ndarray


def pivotal_recursion_curves(dec: Decomposition, T: float, h: float = 1e-3) -> RecursionCurves:
    """Exact survival curves from the first-ring recursion of the branching process.

    Let ``a_plus``, ``a_minus`` be the probabilities that the root's update
    function has degenerated to the constant +1 / -1 by time t, and ``psi``
    the mean number of pivotal leaves.  Conditioning on the first ring
    (type i at rate ``rate_i``) and on the independent states of the
    children (free with probability ``phi``, constant +-1 with probability
    ``a_plus`` / ``a_minus``) gives::

        a_v'  = -lam a_v + sum_i rate_i P(restricted f_i is constant v)
        psi'  = psi * (-lam + sum_i rate_i E[|restricted pivots| / phi])

    where ``phi = 1 - a_plus - a_minus``.  Integrated with RK4.
    """
    tables = dec.tables
    piv, val = boolean.restriction_tables(tables)
    n = dec.n
    rates = dec.rates
    lam = dec.total_rate
    n_codes = 3 ** n
    digits = np.array([[(c // 3 ** j) % 3 for j in range(n)] for c in range(n_codes)])
    n_free = (digits == boolean.FREE).sum(axis=1)
    piv_count = np.array([[bin(int(x)).count("1") for x in row] for row in piv], dtype=np.float64)
    is_plus = (piv == 0) & (val == 1)
    is_minus = (piv == 0) & (val == -1)
    # aggregate over types with their rates
    w_plus = rates @ is_plus.astype(np.float64)
    w_minus = rates @ is_minus.astype(np.float64)
    w_piv = rates @ piv_count
    n_fixed = n - n_free

    def rhs(state):
        ap, am, psi = state
        phi = 1.0 - ap - am
        # probability of each code, with the free factor phi^(|A|-1) for psi
        pf = np.array([phi, ap, am])
        fixed = np.prod(np.where(digits == boolean.FREE, 1.0, pf[digits]), axis=1)
        prob = fixed * phi ** n_free
        prob_psi = np.where(n_free > 0, fixed * phi ** np.maximum(n_free - 1, 0), 0.0)
        dap = -lam * ap + w_plus @ prob
        dam = -lam * am + w_minus @ prob
        dpsi = psi * (-lam + w_piv @ prob_psi)
        return np.array([dap, dam, dpsi])

    if h * lam * n > 0.5:
        raise StepTooLarge("step too large for the branching recursion")
    steps, step = _grid(T, h)
    out = np.empty((steps + 1, 3))
    out[0] = state = np.array([0.0, 0.0, 1.0])
    for k in range(steps):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * step * k1)
        k3 = rhs(state + 0.5 * step * k2)
        k4 = rhs(state + step * k3)
        state = state + step * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        out[k + 1] = state
    ap, am, psi = out.T
    phi = 1.0 - ap - am
    theta = np.zeros_like(phi)
    pos = (ap + am) > 0
    theta[pos] = (ap[pos] - am[pos]) / (ap[pos] + am[pos])
    if len(theta) > 1:
        theta[0] = theta[1]
    return RecursionCurves(times=np.linspace(0.0, steps * step, steps + 1), phi=phi,
                           theta=theta, psi=psi, const_plus=ap, const_minus=am)


def fit_decay_rate(times, values) -> tuple:
    """Least-squares line through ``(t, log value)``.

    Returns ``(slope, intercept, residual)`` with ``residual`` the root mean
    square of the fit residuals in log space.
    """
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if t.shape != v.shape or t.ndim != 1:
        raise ConfigurationError("times and values must be 1-d of equal length")
    if len(t) < 3:
        raise ConfigurationError("need at least three points")
    if np.any(~(v > 0)):
        raise NonPositiveValue("values must be strictly positive")
    y = np.log(v)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid ** 2)))
