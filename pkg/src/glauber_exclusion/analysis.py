"""Estimators and scaling checks.

* total variation between explicit small laws (:func:`tv_exact_small`);
* mixing profiles from the grand coupling and the magnetization statistic
  (:func:`mixing_profile`, :func:`estimate_mixing_time`);
* one- and two-point correlations and the joint law of a few sites
  (:func:`correlation_report`, :func:`replacement_check`);
* the product-measure perturbation bound (:func:`perturbation_bound_check`);
* anticoncentration of two interchange walkers and the dominance coupling
  with independent walkers (:func:`anticoncentration`,
  :func:`ip2_dominance_check`), with exact linear-algebra references.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import stats

from . import graphical, rng
from .errors import (
    CoincidentStart,
    ConfigurationError,
    PreconditionViolated,
    ProfileDoesNotBracket,
    RhoDegenerate,
    SetTooLarge,
    SupportMismatch,
)
from .flip_model import Model
from .hydrodynamics import solve_ode
from .lattice import Torus, all_minus, all_plus

MAX_EXACT_STATES = 1 << 16
BOOTSTRAP_RESAMPLES = 1000
Z95 = float(stats.norm.ppf(0.975))


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------
def wilson_interval(successes, n, z: float = Z95):
    """95% Wilson score interval for a binomial proportion (vectorised)."""
    k = np.asarray(successes, dtype=np.float64)
    if n <= 0:
        raise ConfigurationError("need at least one trial")
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return np.clip(centre - half, 0.0, 1.0), np.clip(centre + half, 0.0, 1.0)


def _bootstrap_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(rng.derive_seed(seed, rng.STREAM_BOOTSTRAP, *keys)))


def product_law(rho: float, n: int) -> np.ndarray:
    """``Rademacher(rho)^n`` over codes ``0..2^n-1`` (bit ``j`` set means spin ``j`` is +1)."""
    if n < 0 or (1 << n) > MAX_EXACT_STATES:
        raise SetTooLarge(f"2^{n} states exceed the enumeration limit")
    codes = np.arange(1 << n)
    ones = np.array([bin(c).count("1") for c in codes])
    p = 0.5 * (1 + rho)
    return p ** ones * (1 - p) ** (n - ones)


# ---------------------------------------------------------------------------
# total variation
# ---------------------------------------------------------------------------
def tv_exact_small(law_a, law_b) -> float:
    """Half the l1 distance between two explicit laws.

    Laws are arrays over a common state enumeration or dicts keyed by state
    (absent keys have probability 0).
    """
    if isinstance(law_a, dict) or isinstance(law_b, dict):
        if not (isinstance(law_a, dict) and isinstance(law_b, dict)):
            raise SupportMismatch("cannot compare a dict law with an array law")
        keys = sorted(set(law_a) | set(law_b), key=repr)
        a = np.array([float(law_a.get(k, 0.0)) for k in keys])
        b = np.array([float(law_b.get(k, 0.0)) for k in keys])
    else:
        a = np.asarray(law_a, dtype=np.float64).reshape(-1)
        b = np.asarray(law_b, dtype=np.float64).reshape(-1)
        if a.shape != b.shape:
            raise SupportMismatch(f"laws live on {a.size} and {b.size} states")
    if a.size > MAX_EXACT_STATES:
        raise SetTooLarge(f"{a.size} states exceed the enumeration limit")
    for p in (a, b):
        if np.any(p < -1e-15) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigurationError("laws must be probability vectors")
    return float(0.5 * np.abs(a - b).sum())


def threshold_tv(sample_a, sample_b) -> float:
    """Largest ``P_a(M >= k) - P_b(M >= k)`` over thresholds ``k`` (at least 0).

    A lower bound on the total variation between the two laws, and when
    ``a`` stochastically dominates ``b`` the natural best-event bound over
    the ordered magnetization values.
    """
    a = np.asarray(sample_a)
    b = np.asarray(sample_b)
    values = np.concatenate([a, b])
    # integer weights scaled by len(a) * len(b) keep the running sum exact
    weights = np.concatenate([np.full(len(a), len(b), np.int64), np.full(len(b), -len(a), np.int64)])
    order = np.argsort(-values, kind="stable")
    v = values[order]
    cum = np.cumsum(weights[order])
    # evaluate only at the end of each run of tied values
    last = np.r_[v[1:] != v[:-1], True]
    return max(0, int(cum[last].max())) / (len(a) * len(b))


# ---------------------------------------------------------------------------
# forward samples
# ---------------------------------------------------------------------------
def _replica_seed(seed: int, L: int, r: int, purpose: int) -> int:
    return rng.derive_seed(seed, rng.STREAM_REPLICA, purpose, L, r)


def map_replicas(func, tasks: list, workers: int = 1) -> list:
    """Apply ``func`` to every task, in task order, optionally on a process pool.

    Replica seeds depend only on the replica index, so the merged result is
    the same for any worker count.
    """
    if workers < 1:
        raise ConfigurationError("workers must be at least 1")
    if workers == 1 or len(tasks) < 2:
        return [func(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor

    chunk = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks, chunksize=chunk))


def _check_model_torus(model: Model, L: int) -> Torus:
    torus = Torus(model.d, int(L))
    torus.check_radius(model.m)
    return torus


@dataclass(frozen=True, eq=False)
class MixingProfile:
    """Upper and lower estimates of ``max_x d_TV(t)`` on a time grid.

    ``d_up`` is the fraction of replicas whose all-plus and all-minus copies
    have not coalesced (Wilson band ``d_up_lo``/``d_up_hi``).  ``d_low`` is
    the threshold bound between the magnetization of the all-plus copy at
    ``t`` and at ``t_star`` (bootstrap band ``d_low_lo``/``d_low_hi``).
    ``magnetization`` holds the all-plus magnetization per replica and grid
    time; ``stationary`` the proxy sample.
    """

    L: int
    times: np.ndarray
    reps: int
    seed: int
    t_star: float
    d_up: np.ndarray
    d_up_lo: np.ndarray
    d_up_hi: np.ndarray
    d_low: np.ndarray
    d_low_lo: np.ndarray
    d_low_hi: np.ndarray
    magnetization: np.ndarray
    stationary: np.ndarray
    not_coalesced: np.ndarray
    reopened: int
    order_violations: int

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "d_up", "d_up_lo", "d_up_hi", "d_low", "d_low_lo", "d_low_hi"])
        for row in zip(self.times, self.d_up, self.d_up_lo, self.d_up_hi, self.d_low,
                       self.d_low_lo, self.d_low_hi):
            w.writerow([f"{v:.10g}" for v in row])
        return buf.getvalue()


def default_t_star(model: Model, L: int) -> float:
    """Stationary proxy time ``4 log |torus| / (2 |R'(rho*)|)``."""
    report = model.regime()
    if report.regime != "High":
        raise ConfigurationError("a default proxy time needs a High-regime model; pass t_star")
    return 4 * model.d * math.log(L) / (2 * abs(report.slope))


def _mixing_replica(task):
    model, L, snaps, t_star, seed, r, force = task
    torus = Torus(model.d, L)
    res = graphical.run_forward(torus, model.decomposition, "GC1", t_star,
                                _replica_seed(seed, L, r, 1), [all_plus(torus), all_minus(torus)],
                                times=snaps, force=force)
    return res.magnetization(0), res.mixed > 0, res.reopened, res.order_violations


def mixing_profile(model: Model, L: int, times, reps: int, seed: int,
                   t_star: Optional[float] = None, bootstrap: int = BOOTSTRAP_RESAMPLES,
                   force: bool = False, workers: int = 1) -> MixingProfile:
    """Coalescence upper bound and magnetization lower bound on ``max_x d_TV``.

    Each replica runs the grand coupling of all-plus and all-minus on GC1
    up to ``t_star``.  Since the all-plus chain is stochastically
    decreasing, ``P(M(X+_t) >= k) - P(M(X+_{t*}) >= k)`` is a lower bound
    on ``d_TV(Law(X+_t), pi)`` for every ``t* >= t``.
    """
    report = model.regime()
    if report.regime != "High":
        warnings.warn(f"{report.regime}-regime model: the proxy for the stationary law is unvalidated",
                      stacklevel=2)
    torus = _check_model_torus(model, L)
    grid = np.asarray(times, dtype=np.float64).reshape(-1)
    if len(grid) == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ConfigurationError("times must be a strictly increasing non-negative grid")
    if reps < 1:
        raise ConfigurationError("need at least one replica")
    if t_star is None:
        t_star = default_t_star(model, L)
    if t_star < grid[-1]:
        raise ConfigurationError("t_star must not precede the last grid time")
    snaps = np.append(grid, t_star) if t_star > grid[-1] else grid.copy()
    graphical.check_desk_scale(torus, force)
    mag = np.empty((reps, len(grid)), dtype=np.int64)
    stat = np.empty(reps, dtype=np.int64)
    open_ = np.zeros((reps, len(grid)), dtype=bool)
    reopened = 0
    violations = 0
    tasks = [(model, int(L), snaps, float(t_star), seed, r, force) for r in range(reps)]
    for r, (m_all, mixed, reo, vio) in enumerate(map_replicas(_mixing_replica, tasks, workers)):
        mag[r] = m_all[: len(grid)]
        stat[r] = m_all[-1]
        open_[r] = mixed[: len(grid)]
        reopened += reo
        violations += vio
    k = open_.sum(axis=0)
    d_up = k / reps
    lo, hi = wilson_interval(k, reps)
    d_low = np.array([threshold_tv(mag[:, j], stat) for j in range(len(grid))])
    boot = np.empty((bootstrap, len(grid)))
    gen = _bootstrap_rng(seed, L, 1)
    for b in range(bootstrap):
        idx = gen.integers(0, reps, reps)
        s = stat[idx]
        for j in range(len(grid)):
            boot[b, j] = threshold_tv(mag[idx, j], s)
    if bootstrap > 0:
        low_lo, low_hi = np.percentile(boot, [2.5, 97.5], axis=0)
    else:
        low_lo = low_hi = d_low.copy()
    return MixingProfile(L=int(L), times=grid, reps=int(reps), seed=int(seed), t_star=float(t_star),
                         d_up=d_up, d_up_lo=lo, d_up_hi=hi, d_low=d_low, d_low_lo=low_lo,
                         d_low_hi=low_hi, magnetization=mag, stationary=stat, not_coalesced=open_,
                         reopened=int(reopened), order_violations=int(violations))


@dataclass(frozen=True)
class MixingTimeEstimate:
    """Crossings of level ``eps``.

    ``upper_point`` / ``lower_point``: crossings of ``d_up`` / ``d_low``.
    ``upper`` / ``lower``: crossings of the outer confidence bands
    (``d_up_hi`` and ``d_low_lo``), forming the interval reported for
    ``t_mix(eps)``.  ``one_sided`` is ``"lower"`` when ``d_up`` never drops
    to ``eps`` on the grid (only a lower bound is known), ``"upper"`` when
    ``d_low`` never exceeds ``eps``, else ``None``.
    """

    eps: float
    lower: float
    upper: float
    lower_point: float
    upper_point: float
    one_sided: Optional[str]


def _first_drop(times, values, eps):
    """Interpolated first time a curve is at most ``eps``; None if never."""
    below = np.nonzero(values <= eps)[0]
    if len(below) == 0:
        return None
    i = int(below[0])
    if i == 0:
        return float(times[0])
    t0, t1, v0, v1 = times[i - 1], times[i], values[i - 1], values[i]
    return float(t0 + (v0 - eps) / (v0 - v1) * (t1 - t0))


def _last_drop(times, values, eps):
    """Interpolated time after which a curve stays at most ``eps``; None if it ends above."""
    above = np.nonzero(values > eps)[0]
    if len(above) == 0:
        return float(times[0])
    i = int(above[-1])
    if i == len(times) - 1:
        return None
    t0, t1, v0, v1 = times[i], times[i + 1], values[i], values[i + 1]
    return float(t0 + (v0 - eps) / (v0 - v1) * (t1 - t0))


def estimate_mixing_time(profile: MixingProfile, eps: float = 0.25,
                         strict: bool = False) -> MixingTimeEstimate:
    """Bracket for ``t_mix(eps)``: lower edge from ``d_low``, upper edge from ``d_up``.

    With ``strict=True`` a one-sided result raises :class:`ProfileDoesNotBracket`.
    """
    if not 0 < eps < 1:
        raise ConfigurationError("eps must lie in (0, 1)")
    t = profile.times
    up_point = _first_drop(t, profile.d_up, eps)
    up = _first_drop(t, profile.d_up_hi, eps)
    low_point = _last_drop(t, profile.d_low, eps)
    low = _last_drop(t, profile.d_low_lo, eps)
    one_sided = None
    if up_point is None or up is None:
        one_sided = "lower"
        up_point = math.inf if up_point is None else up_point
        up = math.inf
    if low_point is None:
        low_point = float(t[-1])
    if low is None:
        low = float(t[-1])
    if one_sided is None and np.all(profile.d_low <= eps) and profile.d_up[0] > eps:
        one_sided = "upper"
    if strict and one_sided is not None:
        raise ProfileDoesNotBracket(f"profile gives only a {one_sided} bound at eps={eps}")
    return MixingTimeEstimate(eps=float(eps), lower=float(low), upper=float(up),
                              lower_point=float(low_point), upper_point=float(up_point),
                              one_sided=one_sided)


# ---------------------------------------------------------------------------
# correlations and two-site replacement
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class ForwardSample:
    """Configurations at time ``t`` from all-plus under GC2, one row per replica."""

    L: int
    t: float
    seed: int
    spins: np.ndarray  # (reps, N) int8
    rho: float  # ODE solution from +1 at time t


def _plus_replica(task):
    model, L, t, seed, r, force = task
    torus = Torus(model.d, L)
    res = graphical.run_forward(torus, model.decomposition, "GC2", t, _replica_seed(seed, L, r, 2),
                                [all_plus(torus)], force=force)
    return res.final_spins(0)


def sample_from_all_plus(model: Model, L: int, t: float, reps: int, seed: int,
                         force: bool = False, workers: int = 1) -> ForwardSample:
    """Configurations at time ``t`` from all-plus, one GC2 run per replica."""
    torus = _check_model_torus(model, L)
    if t < 0:
        raise ConfigurationError("time must be non-negative")
    graphical.check_desk_scale(torus, force)
    out = np.empty((reps, torus.N), dtype=np.int8)
    if t == 0:
        out[:] = 1
        return ForwardSample(L=int(L), t=0.0, seed=int(seed), spins=out, rho=1.0)
    rho = float(solve_ode(model.reaction(), 1.0, t, h=min(1e-3, t)).values[-1])
    tasks = [(model, int(L), float(t), seed, r, force) for r in range(reps)]
    for r, spins in enumerate(map_replicas(_plus_replica, tasks, workers)):
        out[r] = spins
    return ForwardSample(L=int(L), t=float(t), seed=int(seed), spins=out, rho=rho)


@dataclass(frozen=True, eq=False)
class CorrelationReport:
    """One- and two-point statistics of ``X_t`` from all-plus.

    ``deviation[i]`` is ``|E^[X_t(u_i)] - rho(t)|`` with standard error
    ``deviation_se[i]``; ``covariance`` the symmetric matrix of empirical
    covariances between the requested sites.  ``pooled_deviation`` and
    ``lag_covariance[r]`` average over all translations (the law from
    all-plus is translation invariant), which is far less noisy.
    """

    L: int
    t: float
    rho: float
    sites: tuple
    deviation: np.ndarray
    deviation_se: np.ndarray
    covariance: np.ndarray
    covariance_se: np.ndarray
    pooled_deviation: float
    pooled_deviation_se: float
    lag_covariance: np.ndarray
    lag_covariance_se: np.ndarray

    @property
    def max_lag_covariance(self) -> float:
        return float(np.max(np.abs(self.lag_covariance[1:]))) if len(self.lag_covariance) > 1 else 0.0


def correlation_report(model: Model, L: int, t: float, reps: int, seed: int, sites=None,
                       max_lag: int = 3, sample: Optional[ForwardSample] = None) -> CorrelationReport:
    """Deviation from the ODE and covariances at time ``t`` from all-plus (GC2)."""
    if reps < 1000:
        raise ConfigurationError("need at least 1000 replicas")
    if sample is None:
        sample = sample_from_all_plus(model, L, t, reps, seed)
    torus = Torus(model.d, int(L))
    x = sample.spins.astype(np.float64)
    n = x.shape[0]
    sites = tuple(range(min(torus.N, 4))) if sites is None else tuple(torus.index(u) for u in sites)
    xs = x[:, list(sites)]
    mean = xs.mean(axis=0)
    dev = np.abs(mean - sample.rho)
    dev_se = xs.std(axis=0, ddof=1) / math.sqrt(n)
    cov = np.cov(xs, rowvar=False, ddof=1).reshape(len(sites), len(sites))
    centred = xs - mean
    prods = centred[:, :, None] * centred[:, None, :]
    cov_se = prods.std(axis=0, ddof=1) / math.sqrt(n)
    # translation pooling: per-replica site averages are iid across replicas
    m_rep = x.mean(axis=1)
    pooled = float(abs(m_rep.mean() - sample.rho))
    pooled_se = float(m_rep.std(ddof=1) / math.sqrt(n))
    max_lag = min(max_lag, torus.L // 2)
    grand = m_rep.mean()
    lags = np.zeros(max_lag + 1)
    lags_se = np.zeros(max_lag + 1)
    cube = x.reshape((n,) + (torus.L,) * model.d)
    for r in range(max_lag + 1):
        # translate along the first axis only
        shifted = np.roll(cube, -r, axis=model.d).reshape(n, -1)
        per_rep = (x * shifted).mean(axis=1) - grand ** 2
        lags[r] = per_rep.mean()
        lags_se[r] = per_rep.std(ddof=1) / math.sqrt(n)
    return CorrelationReport(L=int(L), t=float(t), rho=sample.rho, sites=sites, deviation=dev,
                             deviation_se=dev_se, covariance=cov, covariance_se=cov_se,
                             pooled_deviation=pooled, pooled_deviation_se=pooled_se,
                             lag_covariance=lags, lag_covariance_se=lags_se)


@dataclass(frozen=True, eq=False)
class ReplacementResult:
    L: int
    t: float
    sites: tuple
    rho: float
    tv: float
    ci_lo: float
    ci_hi: float
    empirical: np.ndarray
    product: np.ndarray
    n_samples: int


def _pattern_counts(spins: np.ndarray, offsets: np.ndarray, torus: Torus, pool: bool) -> np.ndarray:
    """Per-replica histograms of the spin pattern on ``E`` (and its translates if pooled)."""
    n, N = spins.shape
    k = len(offsets)
    plus = (spins > 0).astype(np.int64)
    if pool:
        code = np.zeros((n, N), dtype=np.int64)
        for j, off in enumerate(offsets):
            code += np.roll(plus, -int(off), axis=1) << j if torus.d == 1 else _shift2(plus, off, torus) << j
    else:
        code = np.zeros((n, 1), dtype=np.int64)
        for j, off in enumerate(offsets):
            code[:, 0] += plus[:, int(off)] << j
    counts = np.zeros((n, 1 << k), dtype=np.int64)
    for c in range(1 << k):
        counts[:, c] = (code == c).sum(axis=1)
    return counts


def _shift2(plus, off, torus):
    n = plus.shape[0]
    L = torus.L
    cube = plus.reshape(n, L, L)  # index u = x + L*y -> [y, x]
    dx, dy = off
    return np.roll(np.roll(cube, -dx, axis=2), -dy, axis=1).reshape(n, -1)


def replacement_check(model: Model, L: int, E, t: float, reps: int, seed: int, pool: bool = True,
                      sample: Optional[ForwardSample] = None,
                      bootstrap: int = BOOTSTRAP_RESAMPLES) -> ReplacementResult:
    """TV between the empirical law of ``X_t(E)`` from all-plus and ``Rademacher(rho(t))^|E|``.

    With ``pool=True`` every translate of ``E`` contributes (same law by
    translation invariance).  The confidence interval is a bootstrap
    percentile interval over replicas.
    """
    torus = Torus(model.d, int(L))
    E = list(E)
    if len(E) > 8:
        raise SetTooLarge("at most 8 sites")
    if len(set(torus.index(u) for u in E)) != len(E):
        raise ConfigurationError("E must be a set of distinct sites")
    if sample is None:
        sample = sample_from_all_plus(model, L, t, reps, seed)
    if not E:
        return ReplacementResult(L=int(L), t=float(t), sites=(), rho=sample.rho, tv=0.0, ci_lo=0.0,
                                 ci_hi=0.0, empirical=np.ones(1), product=np.ones(1),
                                 n_samples=sample.spins.shape[0])
    if torus.d == 1:
        offsets = np.array([torus.index(u) for u in E])
    else:
        offsets = [torus.coords(u) for u in E]
    counts = _pattern_counts(sample.spins, offsets, torus, pool)
    prod = product_law(sample.rho, len(E))
    total = counts.sum(axis=0)
    emp = total / total.sum()
    tv = tv_exact_small(emp, prod)
    gen = _bootstrap_rng(seed, L, 2)
    n = counts.shape[0]
    boot = np.empty(bootstrap)
    for b in range(bootstrap):
        w = np.bincount(gen.integers(0, n, n), minlength=n)
        tot = w @ counts
        boot[b] = 0.5 * np.abs(tot / tot.sum() - prod).sum()
    lo, hi = (np.percentile(boot, [2.5, 97.5]) if bootstrap else (tv, tv))
    return ReplacementResult(L=int(L), t=float(t), sites=tuple(E), rho=sample.rho, tv=tv,
                             ci_lo=float(lo), ci_hi=float(hi), empirical=emp, product=prod,
                             n_samples=int(total.sum()))


# ---------------------------------------------------------------------------
# perturbation of a product measure
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PerturbationCheck:
    lhs: float  # 4 TV^2
    chi2: float  # ||mu/nu - 1||^2 in L2(nu)
    rhs: float  # E[theta^|S cap S'|] - 1
    tv: float
    theta: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.chi2 + 1e-12 and self.chi2 <= self.rhs + 1e-12


def perturbation_bound_check(n: int, rho: float, subset_law, perturbations) -> PerturbationCheck:
    """Exact check of ``4 TV(mu, nu)^2 <= chi2 <= E[theta^{|S cap S'|}] - 1``.

    ``nu = Rademacher(rho)^n``.  ``subset_law`` maps subsets of
    ``range(n)`` (any iterable) to probabilities; ``perturbations`` maps the
    same subsets to laws on ``{-1, 1}^S`` given as arrays over codes (bit
    ``j`` set means the ``j``-th smallest element of ``S`` is +1).
    """
    if not -1 < rho < 1:
        raise RhoDegenerate("rho must lie strictly inside (-1, 1)")
    if n < 0 or (1 << n) > MAX_EXACT_STATES:
        raise SetTooLarge("too many variables to enumerate")
    law = {}
    for S, p in subset_law.items():
        key = tuple(sorted(int(i) for i in S))
        if any(not 0 <= i < n for i in key):
            raise ConfigurationError(f"subset {key} outside range({n})")
        law[key] = law.get(key, 0.0) + float(p)
    if abs(sum(law.values()) - 1) > 1e-9:
        raise ConfigurationError("subset law must sum to 1")
    pert = {}
    for S, phi in perturbations.items():
        pert[tuple(sorted(int(i) for i in S))] = np.asarray(phi, dtype=np.float64)
    nu = product_law(rho, n)
    p_plus = 0.5 * (1 + rho)
    codes = np.arange(1 << n)
    mu = np.zeros(1 << n)
    for S, ps in law.items():
        if ps == 0:
            continue
        phi = pert.get(S)
        if phi is None or phi.shape != (1 << len(S),):
            raise ConfigurationError(f"missing or malformed perturbation for subset {S}")
        if abs(phi.sum() - 1) > 1e-9 or np.any(phi < 0):
            raise ConfigurationError(f"perturbation for {S} is not a probability vector")
        inside = np.zeros_like(codes)
        for j, i in enumerate(S):
            inside |= ((codes >> i) & 1) << j
        outside_mask = ((1 << n) - 1) & ~sum(1 << i for i in S)
        out_ones = np.array([bin(c & outside_mask).count("1") for c in codes])
        n_out = n - len(S)
        mu += ps * phi[inside] * p_plus ** out_ones * (1 - p_plus) ** (n_out - out_ones)
    tv = 0.5 * float(np.abs(mu - nu).sum())
    chi2 = float(np.sum(mu * mu / nu) - 1.0)
    theta = max(2 / (1 + rho), 2 / (1 - rho))
    rhs = -1.0
    for S, p in law.items():
        for S2, p2 in law.items():
            rhs += p * p2 * theta ** len(set(S) & set(S2))
    return PerturbationCheck(lhs=4 * tv * tv, chi2=chi2, rhs=float(rhs), tv=tv, theta=theta)


# ---------------------------------------------------------------------------
# interchange walkers
# ---------------------------------------------------------------------------
@njit(cache=True)
def _torus_distance(x, y, L, d):
    dist = 0
    for _ in range(d):
        delta = abs(x % L - y % L)
        dist += min(delta, L - delta)
        x //= L
        y //= L
    return dist


@njit(cache=True)
def _ip2_batch(key, reps, nbr, u1, u2, rate, theta, k, L, d, conditional, tol):
    """Two interchange walkers; per path, the probability that the distance is at most ``k``.

    Direct mode samples ``zeta ~ Exp(theta)`` and returns an indicator.
    Conditional mode integrates ``theta e^{-theta t}`` over the time the
    path spends within distance ``k`` (the conditional expectation given
    the path), stopping once ``e^{-theta t} < tol``.
    """
    out = np.zeros(reps)
    n_dir = nbr.shape[1]
    total = 2 * n_dir * rate  # every walker proposes every incident edge
    horizon = -math.log(tol) / theta
    for r in range(reps):
        s = rng.seeded_state_nb(rng.keyed_u64(key, r))
        zeta = horizon if conditional else rng.next_exponential(s, theta)
        a = u1
        b = u2
        t = 0.0
        acc = 0.0
        near = _torus_distance(a, b, L, d) <= k
        while True:
            t_next = t + rng.next_exponential(s, total)
            if conditional and near:
                acc += math.exp(-theta * t) - math.exp(-theta * min(t_next, zeta))
            if t_next >= zeta:
                break
            t = t_next
            slot = rng.next_below(s, 2 * n_dir)
            walker = slot // n_dir
            direction = slot - walker * n_dir
            src = a if walker == 0 else b
            dst = nbr[src, direction]
            other = b if walker == 0 else a
            if dst == other:
                # the shared edge is proposed by both walkers: keep half
                if rng.next_double(s) < 0.5:
                    a, b = b, a
            elif walker == 0:
                a = dst
            else:
                b = dst
            near = _torus_distance(a, b, L, d) <= k
        out[r] = acc if conditional else (1.0 if near else 0.0)
    return out


@dataclass(frozen=True)
class ProbabilityEstimate:
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    reps: int
    method: str


def anticoncentration(d: int, L: int, theta: float, k: int, reps: int, seed: int,
                      starts=None, method: str = "conditional",
                      tol: float = 1e-7) -> ProbabilityEstimate:
    """``P(dist(U1(zeta), U2(zeta)) <= k)`` for two interchange walkers.

    Edges have conductance ``L^2``; ``zeta ~ Exp(theta)`` is independent.
    ``starts`` defaults to two neighbouring sites.  ``method="direct"``
    samples ``zeta`` (Wilson interval); ``"conditional"`` averages the
    exact conditional probability given each path (normal interval), with
    truncation bias below ``tol``.
    """
    if method not in ("direct", "conditional"):
        raise ConfigurationError("method must be 'direct' or 'conditional'")
    torus = Torus(d, int(L))
    if theta <= 0:
        raise ConfigurationError("theta must be positive")
    if starts is None:
        starts = (0, torus.neighbor_table()[0, 0])
    u1, u2 = (torus.index(u) for u in starts)
    if u1 == u2:
        raise CoincidentStart("the two walkers must start apart")
    if reps < 2:
        raise ConfigurationError("need at least two replicas")
    conditional = method == "conditional"
    if k >= d * (int(L) // 2):
        # every pair of sites is within the torus diameter
        return ProbabilityEstimate(estimate=1.0, se=0.0, ci_lo=1.0, ci_hi=1.0,
                                   reps=int(reps), method=method)
    vals = _ip2_batch(np.uint64(rng.derive_seed(seed, rng.STREAM_WALK, 1, L)), int(reps),
                      torus.neighbor_table(), u1, u2, float(L) ** 2, float(theta), int(k), int(L),
                      d, conditional, float(tol))
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(reps))
    if conditional:
        lo, hi = max(0.0, est - Z95 * se), min(1.0, est + Z95 * se)
    else:
        lo, hi = wilson_interval(vals.sum(), reps)
    return ProbabilityEstimate(estimate=est, se=se, ci_lo=float(lo), ci_hi=float(hi),
                               reps=int(reps), method=method)


def ip2_distance_law(L: int, theta: float) -> np.ndarray:
    """Exact law of the distance at ``Exp(theta)`` for two interchange walkers on a cycle.

    Row ``i`` is the start distance ``i + 1``, column ``j`` the distance
    ``j + 1``.  The distance performs a birth-death chain: from ``r`` to
    ``r +- 1`` at rate ``2 L^2`` each, except that the step to 0 is replaced
    by a swap (no change) and at the antipode both steps go down.
    """
    if L < 3:
        raise ConfigurationError("need L >= 3")
    D = L // 2
    Q = np.zeros((D, D))
    rate = 2.0 * L * L
    for r in range(1, D + 1):
        i = r - 1
        # the displacement steps by +1 and by -1, each at rate 2 L^2
        for step in (1, -1):
            disp = (r + step) % L
            dist = min(disp, L - disp)
            if dist != 0 and dist != r:
                Q[i, dist - 1] += rate
                Q[i, i] -= rate
    A = theta * np.eye(D) - Q
    return np.linalg.solve(A, theta * np.eye(D))


def anticoncentration_exact(L: int, theta: float, k: int, start_distance: Optional[int] = None) -> float:
    """Exact ``P(dist <= k)`` on a cycle; maximum over start distances when not given."""
    law = ip2_distance_law(L, theta)
    probs = law[:, : max(0, min(k, law.shape[1]))].sum(axis=1)
    if start_distance is None:
        return float(probs.max())
    return float(probs[start_distance - 1])


def _torus_abs(x, L):
    x %= L
    return min(x, L - x)


def _coordinate_matching(u, v, L):
    """Permutation ``sigma`` with ``|v[sigma(i)]| <= |u[i]|`` for all ``i``, or None."""
    d = len(u)
    for perm in itertools.permutations(range(d)):
        if all(_torus_abs(v[perm[i]], L) <= _torus_abs(u[i], L) for i in range(d)):
            return perm
    return None


@njit(cache=True)
def _tabs(x, L):
    x = x % L
    return min(x, L - x)


@njit(cache=True)
def _dominance_batch(key, reps, L, d, y0, w0, perm, T):
    """Markovian coupling of the interchange difference ``y`` and an independent-walk difference ``w``.

    Coordinate ``i`` of ``y`` is paired with coordinate ``perm[i]`` of ``w``
    and the pairing keeps ``|w[perm[i]]| <= |y[i]|``.  Returns violations of
    ``dist(w) <= dist(y)`` observed after any jump, the number of jumps,
    and the final distance gaps.
    """
    violations = 0
    jumps = 0
    gaps = np.zeros(reps, dtype=np.int64)
    rate = 2.0 * L * L
    y = np.zeros(d, dtype=np.int64)
    w = np.zeros(d, dtype=np.int64)
    for r in range(reps):
        s = rng.seeded_state_nb(rng.keyed_u64(key, r))
        y[:] = y0
        w[:] = w0
        t = 0.0
        # per coordinate: two directions for y, two for w, plus the swap slot -> 5 slots
        total = 5 * d * rate
        while True:
            t += rng.next_exponential(s, total)
            if t >= T:
                break
            slot = rng.next_below(s, 5 * d)
            i = slot // 5
            kind = slot - 5 * i
            j = perm[i]
            y_is_unit = True
            for c in range(d):
                if c != i and y[c] != 0:
                    y_is_unit = False
            ay = _tabs(y[i], L)
            aw = _tabs(w[j], L)
            moved = False
            if kind == 4:
                # swap of the two interchange walkers: rate L^2 when y = +-e_i
                if y_is_unit and ay == 1 and rng.next_double(s) < 0.5:
                    y[i] = (L - y[i]) % L
                    moved = True
            elif ay > aw:
                # strictly ordered pair: independent moves
                if kind < 2:
                    step = 1 if kind == 0 else -1
                    target = (y[i] + step) % L
                    if not (y_is_unit and target == 0):
                        y[i] = target
                        moved = True
                else:
                    step = 1 if kind == 2 else -1
                    w[j] = (w[j] + step) % L
                    moved = True
            else:
                # equal absolute values: synchronised moves with matching sign
                xi = 1 if (w[j] - y[i]) % L == 0 else -1
                if kind < 2:
                    step = 1 if kind == 0 else -1
                    target = (y[i] + step) % L
                    if y_is_unit and target == 0:
                        # y is blocked; w alone steps to 0 at the same rate
                        w[j] = (w[j] + xi * step) % L
                    else:
                        y[i] = target
                        w[j] = (w[j] + xi * step) % L
                    moved = True
                # kinds 2 and 3 are idle here: w moves only together with y
            if moved:
                jumps += 1
                dy = 0
                dw = 0
                for c in range(d):
                    dy += _tabs(y[c], L)
                    dw += _tabs(w[c], L)
                ok = dw <= dy
                for c in range(d):
                    if _tabs(w[perm[c]], L) > _tabs(y[c], L):
                        ok = False
                if not ok:
                    violations += 1
        dy = 0
        dw = 0
        for c in range(d):
            dy += _tabs(y[c], L)
            dw += _tabs(w[c], L)
        gaps[r] = dy - dw
    return violations, jumps, gaps


@dataclass(frozen=True, eq=False)
class DominanceResult:
    violations: int
    paths: int
    jumps: int
    final_gaps: np.ndarray  # dist(interchange) - dist(independent) at time T


def ip2_dominance_check(d: int, L: int, starts, T: float, reps: int, seed: int) -> DominanceResult:
    """Run the dominance coupling between an IP(2) and two independent walks.

    ``starts = (u1, u2, v1, v2)``: interchange walkers from ``u1, u2``,
    independent walkers from ``v1, v2``.  Requires that the independent
    displacement ``v2 - v1`` is coordinatewise (up to a permutation) no
    farther from 0 than ``u2 - u1``.
    """
    torus = Torus(d, int(L))
    u1, u2, v1, v2 = (torus.coords(x) for x in starts)
    y0 = np.array([(b - a) % L for a, b in zip(u1, u2)], dtype=np.int64)
    w0 = np.array([(b - a) % L for a, b in zip(v1, v2)], dtype=np.int64)
    if not y0.any():
        raise CoincidentStart("interchange walkers must start apart")
    perm = _coordinate_matching(list(y0), list(w0), L)
    if perm is None:
        raise PreconditionViolated("independent displacement is not dominated by the interchange one")
    # the matching must pair equal coordinates consistently for the synchronised moves
    violations, jumps, gaps = _dominance_batch(
        np.uint64(rng.derive_seed(seed, rng.STREAM_WALK, 2, L)), int(reps), int(L), d, y0, w0,
        np.array(perm, dtype=np.int64), float(T))
    return DominanceResult(violations=int(violations), paths=int(reps), jumps=int(jumps),
                           final_gaps=gaps)


# ---------------------------------------------------------------------------
# a single tagged walker
# ---------------------------------------------------------------------------
def walker_occupation_law(L: int, t: float, d: int = 1) -> np.ndarray:
    """Exact law at time ``t`` of a walker with edge conductance ``L^2`` started at 0."""
    if t < 0:
        raise ConfigurationError("time must be non-negative")
    k = np.arange(L)
    x = np.arange(L)
    decay = np.exp(-2.0 * L * L * t * (1 - np.cos(2 * np.pi * k / L)))
    one = (np.cos(2 * np.pi * np.outer(x, k) / L) @ decay) / L
    one = np.clip(one, 0.0, None)
    law = one
    for _ in range(d - 1):
        law = np.multiply.outer(law, one)
    return law.reshape(-1)


@njit(cache=True)
def _walker_batch(key, reps, nbr, rate, t):
    out = np.zeros(reps, dtype=np.int64)
    n_dir = nbr.shape[1]
    for r in range(reps):
        s = rng.seeded_state_nb(rng.keyed_u64(key, r))
        u = 0
        now = 0.0
        while True:
            now += rng.next_exponential(s, n_dir * rate)
            if now >= t:
                break
            u = nbr[u, rng.next_below(s, n_dir)]
        out[r] = u
    return out


def walker_positions(d: int, L: int, t: float, reps: int, seed: int) -> np.ndarray:
    """Monte Carlo positions at time ``t`` of a walker started at 0 (conductance ``L^2``)."""
    torus = Torus(d, int(L))
    return _walker_batch(np.uint64(rng.derive_seed(seed, rng.STREAM_WALK, 3, L)), int(reps),
                         torus.neighbor_table(), float(L) ** 2, float(t))


def local_limit_max(L: int, t: float, d: int = 1) -> float:
    """Largest site probability of the walker at time ``t`` (exact)."""
    return float(walker_occupation_law(L, t, d).max())
