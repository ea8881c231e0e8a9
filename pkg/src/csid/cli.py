"""Command-line front end: ``csid fit | predict | evaluate | cv | synth``."""

from __future__ import annotations

import functools
import logging
import sys
from dataclasses import replace

import click
import numpy as np

from . import io
from .data import DEFAULT_ALPHABET, DataError
from .pipeline import MISSING_POLICIES, fit_dataset
from .selection import DEFAULT_GRID, Grid, cross_validate, monte_carlo
from .solver import DIFFERENCES, FitError, SolverConfig

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _guard(fun):
    """Map library errors onto exit codes with a one-line message."""

    @functools.wraps(fun)
    def wrapper(*args, **kwargs):
        try:
            return fun(*args, **kwargs)
        except (DataError, io.ArtifactError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except (FitError, FloatingPointError, np.linalg.LinAlgError) as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    return wrapper


def _numbers(kind):
    def parse(ctx, param, value):
        if value is None:
            return None
        try:
            return tuple(kind(v) for v in value.split(",") if v.strip())
        except ValueError:
            raise click.BadParameter(f"expected comma-separated numbers, got {value!r}")

    return parse


def _single(value, name):
    if value is None:
        return None
    if len(value) != 1:
        raise click.UsageError(f"--{name} takes a single value here")
    return value[0]


def solver_options(fun):
    options = [
        click.option("--rank", callback=_numbers(int), help="CPD rank F."),
        click.option("--rho", callback=_numbers(float), help="Ridge weight."),
        click.option("--mu", callback=_numbers(float), help="Smoothness weight for ordinal "
                     "and continuous predictors."),
        click.option("--diff", "difference", type=click.Choice(DIFFERENCES), default="first",
                     show_default=True, help="Difference operator of the smoothness penalty."),
        click.option("--alphabet", type=click.IntRange(min=2), default=DEFAULT_ALPHABET,
                     show_default=True, help="Levels for continuous predictors."),
        click.option("--max-sweeps", type=click.IntRange(min=0), default=500, show_default=True),
        click.option("--tol", type=click.FloatRange(min=0), default=1e-6, show_default=True,
                     help="Stop when the relative objective change drops below this."),
        click.option("--restarts", type=click.IntRange(min=1), default=1, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--missing", type=click.Choice(MISSING_POLICIES), default="drop",
                     show_default=True, help="Training rows with missing predictors: drop "
                     "them, or fit them through the conditional expectation."),
    ]
    for option in reversed(options):
        fun = option(fun)
    return fun


def _config(rank, rho, mu, difference, max_sweeps, tol, restarts, seed) -> SolverConfig:
    defaults = SolverConfig()
    try:
        return SolverConfig(
            rank=defaults.rank if rank is None else rank,
            rho=defaults.rho if rho is None else rho,
            mu=defaults.mu if mu is None else mu,
            difference=difference,
            max_sweeps=max_sweeps,
            rel_tol=tol,
            restarts=restarts,
            seed=seed,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None


def _fmt(x) -> str:
    return repr(float(x))


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug output).")
def cli(verbose):
    """Nonlinear regression by smooth low-rank tensor completion."""
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.argument("train_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("schema_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", "model_path", type=click.Path(dir_okay=False),
              default="model.json", show_default=True, help="Where to write the model.")
@solver_options
@_guard
def fit(train_csv, schema_file, model_path, rank, rho, mu, difference, alphabet,
        max_sweeps, tol, restarts, seed, missing):
    """Fit a model to TRAIN_CSV described by SCHEMA_FILE."""
    schema = io.read_schema(schema_file)
    data = io.read_table(train_csv, schema)
    cfg = _config(_single(rank, "rank"), _single(rho, "rho"), _single(mu, "mu"), difference,
                  max_sweeps, tol, restarts, seed)
    fitted = fit_dataset(data, cfg, schema.alphabets(alphabet), missing)
    io.save_artifact(fitted, model_path)
    rep = fitted.report
    trace = rep.objective_trace
    status = "converged" if rep.converged else "stopped at the sweep limit"
    click.echo(f"restart {rep.restart + 1} of {cfg.restarts}: {rep.sweeps} sweeps, {status}")
    click.echo(f"objective: {trace[0]:.6g} -> {trace[-1]:.6g}")
    if rep.fallback_solves:
        click.echo(f"minimum-norm fallback solves: {rep.fallback_solves}")
    click.echo(f"train rmse: {fitted.rmse(data):.6g}")
    click.echo(f"wrote {model_path}")


def _artifact_schema(fitted) -> io.SchemaFile:
    cols = [io.ColumnRole(f.name, f.kind) for f in fitted.schema.features]
    cols += [io.ColumnRole(r, "response") for r in fitted.schema.responses]
    return io.SchemaFile(tuple(cols))


@cli.command()
@click.argument("model_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.File("w"), default="-",
              help="Predictions CSV (default: stdout).")
@_guard
def predict(model_file, input_csv, output):
    """Predict the responses of every row of INPUT_CSV.

    Empty or NA predictor cells are filled in by the conditional expectation
    under the stored marginals.
    """
    fitted = io.load_artifact(model_file)
    data = io.read_table(input_csv, _artifact_schema(fitted), responses="ignore")
    pred = fitted.predict(data).reshape(len(data), len(fitted.schema.responses))
    io.write_table(output, list(fitted.schema.responses), pred.tolist())


@cli.command()
@click.argument("model_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("test_csv", type=click.Path(exists=True, dir_okay=False))
@_guard
def evaluate(model_file, test_csv):
    """RMSE of a saved model on TEST_CSV (pooled over vector responses)."""
    fitted = io.load_artifact(model_file)
    data = io.read_table(test_csv, _artifact_schema(fitted), responses="optional")
    keep = np.all(np.isfinite(data.responses), axis=1)
    if not keep.any():
        raise DataError(f"{test_csv}: no rows with response values")
    click.echo(f"rows,{int(keep.sum())}")
    click.echo(f"rmse,{_fmt(fitted.rmse(data))}")


@cli.command()
@click.argument("train_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("schema_file", type=click.Path(exists=True, dir_okay=False))
@solver_options
@click.option("--folds", type=click.IntRange(min=2), default=5, show_default=True)
@click.option("--repeats", type=click.IntRange(min=1), default=None,
              help="Monte-Carlo runs of split / tune / refit / test. Without it the "
              "grid is cross-validated on the whole file.")
@click.option("--train-frac", type=click.FloatRange(0, 1, min_open=True, max_open=True),
              default=0.8, show_default=True)
@click.option("--cv-max-sweeps", type=click.IntRange(min=0), default=None,
              help="Sweep limit for the fits inside CV (default: --max-sweeps).")
@click.option("--cv-tol", type=click.FloatRange(min=0), default=None,
              help="Stopping tolerance inside CV (default: --tol).")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
              help="Worker processes for grid cells and folds.")
@click.option("--table", type=click.File("w"), default=None,
              help="Also write the per-cell CV table of every repeat here.")
@_guard
def cv(train_csv, schema_file, rank, rho, mu, difference, alphabet, max_sweeps, tol,
       restarts, seed, missing, folds, repeats, train_frac, cv_max_sweeps, cv_tol, jobs,
       table):
    """Grid search over --rank/--rho/--mu (comma-separated lists) by k-fold CV."""
    schema = io.read_schema(schema_file)
    data = io.read_table(train_csv, schema)
    grid = Grid(rank or DEFAULT_GRID.ranks, rho or DEFAULT_GRID.rhos, mu or DEFAULT_GRID.mus)
    for cell in grid.cells():
        _config(*cell, difference, max_sweeps, tol, restarts, seed)
    cfg = _config(None, None, None, difference, max_sweeps, tol, restarts, seed)
    cv_cfg = replace(
        cfg,
        max_sweeps=max_sweeps if cv_max_sweeps is None else cv_max_sweeps,
        rel_tol=tol if cv_tol is None else cv_tol,
    )
    alphabets = schema.alphabets(alphabet)
    header = ["rank", "rho", "mu", "cv_rmse_mean", "cv_rmse_std"]
    if repeats is None:
        result = cross_validate(data, grid, cv_cfg, folds, seed, alphabets, missing, jobs)
        io.write_table(sys.stdout, header, result.table())
        if table is not None:
            io.write_table(table, header, result.table())
        b = result.best
        click.echo(f"# best rank={b.rank} rho={b.rho:g} mu={b.mu:g} cv_rmse={b.mean:.6g}")
        return
    runs = monte_carlo(data, grid, cfg, repeats, train_frac, folds, seed, alphabets,
                       missing, cv_cfg, jobs)
    rows = [(r.repeat + 1, r.best.rank, r.best.rho, r.best.mu, r.best.mean, r.test_rmse)
            for r in runs]
    io.write_table(sys.stdout, ["repeat", "rank", "rho", "mu", "cv_rmse", "test_rmse"], rows)
    if table is not None:
        io.write_table(table, ["repeat"] + header,
                       [(r.repeat + 1,) + row for r in runs for row in r.cv.table()])
    scores = np.array([r.test_rmse for r in runs])
    click.echo(f"# test rmse mean={scores.mean():.6g} std={scores.std():.6g} "
               f"over {len(scores)} repeats")


@cli.command()
@click.argument("kind", type=click.Choice(["sign-product", "sign-sum"]))
@click.argument("csv_path", type=click.Path(dir_okay=False))
@click.argument("schema_path", type=click.Path(dir_okay=False))
@click.option("--modes", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--fraction", type=click.FloatRange(0, 1, min_open=True), default=0.3,
              show_default=True, help="Share of grid cells to sample without replacement.")
@click.option("--seed", type=int, default=0, show_default=True)
def synth(kind, csv_path, schema_path, modes, fraction, seed):
    """Write a product-of-signs or sum-of-signs table over {-1, +1}^N."""
    from .datasets import sign_table

    x, y = sign_table(kind, modes, fraction, seed)
    names = [f"x{n}" for n in range(1, modes + 1)]
    with open(csv_path, "w", newline="") as fh:
        io.write_table(fh, names + ["y"], [list(map(int, row)) + [float(v)]
                                           for row, v in zip(x, y)])
    with open(schema_path, "w") as fh:
        fh.writelines(f"{n} = ordinal\n" for n in names)
        fh.write("y = response\n")
    click.echo(f"wrote {len(y)} rows to {csv_path}")


def main(argv=None):
    cli.main(args=argv, prog_name="csid")


if __name__ == "__main__":
    main()
