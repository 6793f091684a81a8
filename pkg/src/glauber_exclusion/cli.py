"""Command-line experiment runner.

Every output starts with a comment line carrying the tool version, the
master seed and the SHA-256 of the canonical JSON configuration, so the
same configuration reproduces the same bytes.  Exit codes: 0 success,
2 configuration error, 3 runtime guard tripped.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from typing import Optional

import click
import numpy as np

from . import __version__, analysis, dual, graphical, hydrodynamics
from .errors import ConfigurationError, GlauberExclusionError, RuntimeGuardError
from .flip_model import Model, load_model, make_model
from .lattice import Torus

BUILTIN_MODELS = ("demasi", "theta", "constant")


def _floats(text: Optional[str], what: str) -> list:
    if text is None:
        return []
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"{what} must be a comma-separated list of numbers") from exc


def _ints(text: Optional[str], what: str) -> list:
    vals = _floats(text, what)
    if any(v != int(v) for v in vals):
        raise ConfigurationError(f"{what} must be integers")
    return [int(v) for v in vals]


def _load(model: str, gamma, theta, d: int, m: int) -> Model:
    if model in BUILTIN_MODELS:
        if model in ("demasi", "theta") and (d, m) != (1, 1):
            raise ConfigurationError(f"{model} model is defined for d=1, m=1")
        return make_model(model, gamma=gamma, theta=theta, d=d, m=m)
    try:
        return load_model(model)
    except OSError as exc:
        raise ConfigurationError(f"cannot read model file {model!r}: {exc.strerror}") from exc


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of a configuration."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _header(seed: int, config: dict) -> str:
    return f"# glauber_exclusion {__version__} seed={seed} config={config_hash(config)}\n"


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        click.echo(text, nl=False)
    else:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)


def _fmt(v) -> str:
    return "inf" if v == math.inf else f"{v:.10g}"


def model_options(fn):
    opts = [
        click.option("--model", default="demasi", show_default=True,
                     help="Builtin name (demasi, theta, constant) or path to a JSON model file."),
        click.option("--gamma", type=float, default=5 / 12, show_default=True,
                     help="Coupling for the demasi model."),
        click.option("--theta", type=float, default=1.0, show_default=True,
                     help="Parameter of the theta model."),
        click.option("--d", "d", type=int, default=1, show_default=True, help="Lattice dimension."),
        click.option("--m", "m", type=int, default=1, show_default=True, help="Interaction radius."),
        click.option("--seed", type=int, default=0, show_default=True, help="Master seed."),
        click.option("--out", type=click.Path(dir_okay=False), default=None,
                     help="Output file (default: standard output)."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _config(command: str, model: Model, **params) -> dict:
    return {"command": command, "model": model.to_dict(), **params}


@click.group()
@click.version_option(__version__, prog_name="glauber-exclusion")
def cli():
    """Experiments on the Glauber-Exclusion process."""


@cli.command()
@model_options
def classify(model, gamma, theta, d, m, seed, out):
    """Regime report of a model as JSON."""
    mdl = _load(model, gamma, theta, d, m)
    rep = mdl.regime()
    cfg = _config("classify", mdl)
    body = {
        "_meta": {"tool": "glauber_exclusion", "version": __version__, "seed": seed,
                  "config": config_hash(cfg)},
        "regime": rep.regime,
        "roots": [{"root": r, "tangential": bool(tan)} for r, tan in rep.roots],
        "slope": rep.slope,
        "R_coeffs": list(mdl.reaction().coeffs),
        "decomposition_summary": mdl.decomposition.summary(),
    }
    _emit(json.dumps(body, sort_keys=True, indent=2) + "\n", out)


@cli.command()
@model_options
@click.option("--T", "T", type=float, default=10.0, show_default=True, help="Horizon.")
@click.option("--step", type=float, default=1e-2, show_default=True, help="Output grid step.")
def hydro(model, gamma, theta, d, m, seed, out, T, step):
    """Hydrodynamic curves (t, rho_plus, rho_minus, phi, theta) as CSV."""
    mdl = _load(model, gamma, theta, d, m)
    cfg = _config("hydro", mdl, T=T, step=step)
    res = hydrodynamics.derived_functions(mdl.reaction(), T, step)
    _emit(res.to_csv(_header(seed, cfg)), out)


@cli.command()
@model_options
@click.option("--L", "L", type=int, required=True, help="Torus side length.")
@click.option("--times", required=True, help="Comma-separated increasing time grid.")
@click.option("--reps", type=int, default=200, show_default=True)
@click.option("--eps", type=float, default=0.25, show_default=True)
@click.option("--t-star", type=float, default=None,
              help="Stationary proxy time (default: model-based).")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--force-large", is_flag=True, help="Override desk-scale guards.")
def mix(model, gamma, theta, d, m, seed, out, L, times, reps, eps, t_star, workers, force_large):
    """Mixing profile as CSV with a trailing mixing-time summary."""
    mdl = _load(model, gamma, theta, d, m)
    grid = _floats(times, "times")
    cfg = _config("mix", mdl, L=L, times=grid, reps=reps, eps=eps, t_star=t_star)
    prof = analysis.mixing_profile(mdl, L, grid, reps, seed, t_star=t_star, force=force_large,
                                   workers=workers)
    est = analysis.estimate_mixing_time(prof, eps)
    text = prof.to_csv(_header(seed, cfg))
    text += (f"# t_star={_fmt(prof.t_star)} eps={_fmt(est.eps)}\n"
             f"# t_mix_lower={_fmt(est.lower)} t_mix_upper={_fmt(est.upper)}\n"
             f"# t_mix_lower_point={_fmt(est.lower_point)} "
             f"t_mix_upper_point={_fmt(est.upper_point)} one_sided={est.one_sided}\n")
    _emit(text, out)


@cli.command("dual")
@model_options
@click.option("--times", default="0.5,1,2,4", show_default=True, help="Comma-separated times.")
@click.option("--reps", type=int, default=10000, show_default=True)
@click.option("--coupling-L", "coupling_L", default=None,
              help="Comma-separated side lengths for the coupling-failure table.")
@click.option("--subset", default="0,1", show_default=True,
              help="Comma-separated root sites for the coupling table.")
@click.option("--coupling-reps", type=int, default=1000, show_default=True)
def dual_cmd(model, gamma, theta, d, m, seed, out, times, reps, coupling_L, subset, coupling_reps):
    """Survival functions of the branching dual, and optionally coupling failure rates."""
    mdl = _load(model, gamma, theta, d, m)
    grid = _floats(times, "times")
    sizes = _ints(coupling_L, "coupling-L")
    E = _ints(subset, "subset")
    cfg = _config("dual", mdl, times=grid, reps=reps, coupling_L=sizes, subset=E,
                  coupling_reps=coupling_reps)
    est = dual.estimate_survival_functions(mdl.decomposition, grid, reps, seed)
    lines = [_header(seed, cfg), "t,phi,phi_se,psi,psi_se,theta,theta_se\n"]
    for row in zip(est.times, est.phi, est.phi_se, est.psi, est.psi_se, est.theta, est.theta_se):
        lines.append(",".join(_fmt(v) for v in row) + "\n")
    if sizes:
        lines.append("# coupling\nL,reps,failures,probability,se,censored\n")
        for L in sizes:
            res = dual.coupling_failure_probability(mdl.decomposition, Torus(mdl.d, L), E,
                                                    coupling_reps, seed)
            lines.append(f"{L},{res.reps},{res.failures},{_fmt(res.probability)},"
                         f"{_fmt(res.se)},{res.censored}\n")
    _emit("".join(lines), out)


@cli.command()
@model_options
@click.option("--L", "L", required=True, help="Comma-separated side lengths.")
@click.option("--k", "k", type=int, default=1, show_default=True, help="Distance threshold.")
@click.option("--rate", type=float, default=None,
              help="Rate of the exponential time (default: twice the total clock rate).")
@click.option("--reps", type=int, default=300, show_default=True)
@click.option("--exact", is_flag=True, help="Use the exact distance-chain solve (d=1 only).")
def anticonc(model, gamma, theta, d, m, seed, out, L, k, rate, reps, exact):
    """Anticoncentration of two interchange walkers as CSV (L, estimate, ci_lo, ci_hi)."""
    mdl = _load(model, gamma, theta, d, m)
    sizes = _ints(L, "L")
    if rate is None:
        rate = 2 * mdl.decomposition.total_rate
    if exact and d != 1:
        raise ConfigurationError("the exact solve is one-dimensional")
    cfg = _config("anticonc", mdl, L=sizes, k=k, rate=rate, reps=reps, exact=exact)
    lines = [_header(seed, cfg), "L,estimate,ci_lo,ci_hi\n"]
    for side in sizes:
        if exact:
            p = analysis.anticoncentration_exact(side, rate, k, start_distance=1)
            lines.append(f"{side},{_fmt(p)},{_fmt(p)},{_fmt(p)}\n")
        else:
            est = analysis.anticoncentration(d, side, rate, k, reps, seed)
            lines.append(f"{side},{_fmt(est.estimate)},{_fmt(est.ci_lo)},{_fmt(est.ci_hi)}\n")
    _emit("".join(lines), out)


@cli.command()
@model_options
@click.option("--L", "L", type=int, required=True, help="Torus side length.")
@click.option("--times", required=True, help="Comma-separated increasing time grid.")
@click.option("--force-large", is_flag=True, help="Override desk-scale guards.")
def regions(model, gamma, theta, d, m, seed, out, L, times, force_large):
    """Sizes of the red, blue and green regions as CSV."""
    mdl = _load(model, gamma, theta, d, m)
    grid = _floats(times, "times")
    if not grid:
        raise ConfigurationError("times must not be empty")
    cfg = _config("regions", mdl, L=L, times=grid)
    torus = Torus(mdl.d, L)
    torus.check_radius(mdl.m)
    sizes = graphical.region_sizes(torus, mdl.decomposition, max(grid), seed, grid,
                                   force=force_large)
    lines = [_header(seed, cfg), "t,red,blue,green\n"]
    for t, row in zip(grid, np.asarray(sizes)):
        lines.append(f"{_fmt(t)},{int(row[0])},{int(row[1])},{int(row[2])}\n")
    _emit("".join(lines), out)


def main(argv=None) -> int:
    """Entry point mapping package errors to exit codes."""
    try:
        cli.main(args=argv, prog_name="glauber-exclusion", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.Abort:
        return 1
    except RuntimeGuardError as exc:
        click.echo(f"runtime guard: {exc}", err=True)
        return 3
    except ConfigurationError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return 2
    except GlauberExclusionError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
