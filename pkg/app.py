#!/usr/bin/env python3
import json
import logging
import pathlib
import typing

import click
import munch
from colors import color

import blockopt
import contrib.experiments
import util
import worker_pool
from blockopt.blockstruct import BlockNorms
from blockopt.errors import (
    BlockStructureError,
    BundleFormatError,
    EnumerationBudgetError,
    NumericalError,
    ProblemValidationError,
)
from blockopt.solvers import Algorithm, SolverConfig, StopRule

EXIT_NUMERIC = 3
EXIT_IO = 4

LOG_LEVELS = [logging.WARNING, logging.INFO, logging.DEBUG]


class BlockoptGroup(click.Group):
    """
    Maps library failures onto exit codes: 2 usage, 3 numeric failure, 4 I/O
    """

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except NumericalError as e:
            click.echo(color(f"Numerical failure: {e}", fg="red"), err=True)
            ctx.exit(EXIT_NUMERIC)
        except (OSError, BundleFormatError) as e:
            click.echo(color(f"I/O failure: {e}", fg="red"), err=True)
            ctx.exit(EXIT_IO)
        except (ProblemValidationError, BlockStructureError, EnumerationBudgetError) as e:
            raise click.UsageError(str(e), ctx)


def stop_rule(ctx: click.Context, param: click.Parameter, value: typing.Optional[str]):
    if value is None:
        return None
    try:
        return StopRule.parse(value)
    except ValueError as e:
        raise click.BadParameter(str(e), ctx=ctx, param=param)


def merged_settings(config: typing.Optional[str], **flags) -> typing.Dict[str, typing.Any]:
    """
    Config file values overridden by any flag that was given
    """
    settings = util.read_config(config) if config else {}
    settings.update({key: value for key, value in flags.items() if value is not None})
    return settings


def solver_config(ctx: click.Context, settings: typing.Dict[str, typing.Any]) -> SolverConfig:
    try:
        return SolverConfig.from_mapping(settings)
    except ValueError as e:
        raise click.UsageError(str(e), ctx)


# https://stackoverflow.com/a/40195800/2751619
def add_options(options):
    def _add_options(func):
        for option in reversed(options):
            func = option(func)
        return func

    return _add_options


run_options = add_options(
    [
        click.option("--max-iters", type=click.IntRange(min=0), default=None, help="Iteration cap"),
        click.option(
            "--stop",
            default=None,
            callback=stop_rule,
            help="Stop rule: f_ratio:EPS (f(x) <= EPS b^T b), gap:EPS, stationarity:EPS or iter",
        ),
        click.option("--seed", type=int, default=None, help="Sampler and generator seed"),
        click.option(
            "--workers", type=click.IntRange(min=1), default=None, help="Threads for block subproblems"
        ),
        click.option(
            "--config",
            type=click.Path(exists=True, dir_okay=False),
            default=None,
            help="key=value file of solver settings; flags win over it",
        ),
    ]
)


@click.group(cls=BlockoptGroup)
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG")
@click.pass_context
def cli(ctx, verbose):
    ctx.ensure_object(munch.Munch)
    logging.basicConfig(level=LOG_LEVELS[min(verbose, len(LOG_LEVELS) - 1)])
    ctx.obj.verbose = verbose


@cli.command()
@click.option(
    "--family",
    type=click.Choice(["block-angular", "bounded-row"]),
    default="block-angular",
    show_default=True,
)
@click.option("--n", "n", type=click.IntRange(min=1), default=None, help="Number of blocks")
@click.option("--omega", type=click.IntRange(min=1), default=None, help="Degree of partial separability")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--m", "m", type=click.IntRange(min=1), default=None, help="Rows (bounded-row)")
@click.option("--block-rows", type=click.IntRange(min=1), default=None, help="Rows of each C_i (block-angular)")
@click.option("--block-cols", type=click.IntRange(min=1), default=None, help="Columns per block")
@click.option("--c-density", type=float, default=None)
@click.option("--d-density", type=float, default=None)
@click.option("--linking-rows", type=click.IntRange(min=1), default=None)
@click.option("--rhs", type=click.Choice(["feasible", "random"]), default=None)
@click.option("--full-scale", is_flag=True, help="Start from the full-size preset")
@click.option("--out", type=click.Path(dir_okay=False, writable=True), required=True, help="Bundle file")
@click.pass_context
def generate(ctx, family, full_scale, out, **overrides):
    spec = contrib.experiments.preset(family, full_scale)
    try:
        spec = spec.replace(**{key: value for key, value in overrides.items() if value is not None})
    except ProblemValidationError as e:
        raise click.UsageError(str(e), ctx)

    A, _ = blockopt.generators.generate(spec)
    p = blockopt.CompositeProblem(A)
    report = blockopt.separability.separability_report(A, brute_force=False)
    blockopt.bundle.save(out, p)

    provenance = munch.Munch(spec=spec.to_dict(), separability=report.to_dict(), shape=list(A.shape), nnz=A.nnz)
    pathlib.Path(f"{out}.json").write_text(provenance.toJSON(indent=2, sort_keys=True) + "\n")

    verdict = color("ok", fg="green") if report.omega == spec.omega else color("mismatch", fg="red")
    click.echo(f"Wrote {out}: {A.shape[0]}x{A.shape[1]}, {A.nnz} nonzeros, omega={report.omega} ({verdict})")


@cli.command()
@click.argument("bundle_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--algorithm", type=click.Choice([a.value for a in Algorithm]), default=None)
@click.option("--theta", type=float, default=None, help="DQAM family stepsize in (0, 1]")
@click.option("--tau", type=click.IntRange(min=1), default=None, help="Blocks per PCDM iteration")
@click.option("--processors", type=click.IntRange(min=1), default=None, help="p of the time-unit model")
@click.option("--norms", type=click.Choice(["identity", "curvature"]), default="identity", show_default=True)
@click.option("--inner-algorithm", type=click.Choice([a.value for a in Algorithm if a is not Algorithm.MOM]), default=None)
@click.option("--outer-iters", type=click.IntRange(min=1), default=None)
@click.option("--inner-tol", type=float, default=None)
@click.option("--out", type=click.File("w"), default="-", help="Trace CSV, stdout by default")
@run_options
@click.pass_context
def solve(ctx, bundle_path, norms, out, config, **flags):
    settings = merged_settings(config, **flags)
    solver = solver_config(ctx, settings)
    p = blockopt.bundle.load(bundle_path)
    if norms == "curvature":
        p = p.with_norms(BlockNorms.curvature(p.A, p.r))

    trace = blockopt.solvers.run(p, solver)
    trace.write_csv(out)

    final = trace.final
    state = color("converged", fg="green") if trace.converged else color("max_iters reached", fg="yellow")
    click.echo(
        f"{solver.algorithm.value}: {state} after {final.k} iterations, {final.epochs:g} epochs, "
        f"{final.time_units} time units, gap {final.gap:.3e}, F {final.F:.10g}",
        err=out.name == "<stdout>",
    )


@cli.command()
@click.option(
    "--family",
    type=click.Choice(["block-angular", "bounded-row"]),
    default="block-angular",
    show_default=True,
)
@click.option("--omega", "omegas", type=click.IntRange(min=1), multiple=True, help="Repeatable, preset grid by default")
@click.option("--tau", "taus", type=click.IntRange(min=1), multiple=True, help="Repeatable (bounded-row)")
@click.option("--reps", type=click.IntRange(min=1), default=contrib.experiments.REPLICATIONS, show_default=True)
@click.option("--full-scale", is_flag=True)
@click.option("--out", type=click.File("w"), default="-")
@run_options
@click.pass_context
def compare(ctx, family, omegas, taus, reps, full_scale, out, config, seed, workers, **flags):
    settings = merged_settings(config, **flags)
    settings.setdefault("stop", contrib.experiments.DEFAULT_STOP)
    settings.setdefault("max_iters", contrib.experiments.DEFAULT_MAX_ITERS)
    solver = solver_config(ctx, settings)

    spec = contrib.experiments.preset(family, full_scale)
    omegas = omegas or contrib.experiments.default_omegas(family, full_scale)
    taus = taus or contrib.experiments.TIMEUNITS_TAUS
    base = seed or 0
    seeds = list(range(base, base + reps))

    with worker_pool.Pool(workers=workers or 1) as pool:
        rows = contrib.experiments.compare(spec, omegas, seeds, solver, taus, pool)
    contrib.experiments.write_rows(out, rows)
    click.echo(f"{len(rows)} runs over omega {list(omegas)}", err=out.name == "<stdout>")


def measured_constants(p: blockopt.CompositeProblem) -> munch.Munch:
    info_e = blockopt.problem.strong_convexity_constants(p)
    info_L = blockopt.problem.strong_convexity_constants(p, p.L)
    return munch.Munch(
        omega=p.omega,
        L=p.L.tolist(),
        L_prime=float(p.L.max()),
        L_bar=float(p.L.mean()),
        mu_e=munch.Munch(info_e.to_dict()),
        mu_L=munch.Munch(info_L.to_dict()),
    )


@cli.command()
@click.option("--bundle", "bundle_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--omega", type=click.IntRange(min=1), default=None)
@click.option("--Lp", "L_prime", type=float, default=None, help="L', the largest block constant")
@click.option("--Lbar", "L_bar", type=float, default=None, help="Average block constant")
@click.option("--muF", "mu_F", type=float, default=None, help="mu_F(e)")
@click.option("--muf", "mu_f", type=float, default=None, help="mu_f(e)")
@click.option("--muF-L", "mu_F_L", type=float, default=None, help="mu_F(L), approximated from mu_F(e) if absent")
@click.option("--muf-L", "mu_f_L", type=float, default=None)
@click.option("--muF-eq-muf", "equal_mu", is_flag=True, help="Set mu_f = mu_F")
@click.option("--n", "n", type=click.IntRange(min=1), default=None)
@click.option("--tau", type=click.IntRange(min=1), default=None)
@click.option("--processors", type=click.IntRange(min=1), default=None)
@click.option("--gap0", type=float, default=None)
@click.option("--eps", type=float, default=None)
@click.option("--rho", type=float, default=0.1, show_default=True)
@click.pass_context
def complexity(ctx, bundle_path, omega, L_prime, L_bar, mu_F, mu_f, mu_F_L, mu_f_L, equal_mu, **extra):
    report = munch.Munch()
    if bundle_path is not None:
        p = blockopt.bundle.load(bundle_path)
        p.validate_for_solvers()
        measured = measured_constants(p)
        report.measured = measured
        omega = omega or measured.omega
        L_prime, L_bar = measured.L_prime, measured.L_bar
        mu_F, mu_f = measured.mu_e.mu_F, measured.mu_e.mu_f
        mu_F_L, mu_f_L = measured.mu_L.mu_F, measured.mu_L.mu_f
        extra["n"] = extra["n"] or p.n
        if mu_F <= 0:
            report.notes = ["F is not strongly convex, linear rates unavailable"]
            click.echo(json.dumps(report, indent=2, sort_keys=True))
            return
    else:
        missing = [name for name, value in (("--omega", omega), ("--Lp", L_prime), ("--Lbar", L_bar), ("--muF", mu_F)) if value is None]
        if missing:
            raise click.UsageError(f"Without --bundle, {', '.join(missing)} are required", ctx)
        if equal_mu or mu_f is None:
            mu_f = mu_F

    estimate = blockopt.analysis.complexity_estimate(
        omega, L_prime, L_bar, mu_F, mu_f, mu_F_L, mu_f_L, **extra
    )
    report.estimate = estimate.to_dict()
    click.echo(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    cli()
