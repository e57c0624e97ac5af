#!/usr/bin/env python3
"""
VoI Control Experiment Manager

Command-line front end for the value-of-information event-triggered
estimation and control toolkit: validate models, solve the Riccati pass,
build VoI tables, simulate, compare schedulers and sweep lambda.

Usage:
    python manage.py validate --config configs/pendulum.json
    python manage.py simulate --config configs/pendulum.json --out runs/pendulum
    python manage.py compare  --config configs/scalar-desk.json --seeds 10000
    python manage.py sweep    --config configs/scalar-desk.json --lambdas 0.5,1,2
    python manage.py status

Exit codes: 0 success, 2 unreadable or malformed config, 3 invariant
violations, 1 any other failure.
"""

import functools
import logging
import os
import sys
import time
from contextlib import contextmanager

import click
from dotenv import load_dotenv

from estimator import EstimatorError
from experiment import (
    ExperimentConfig,
    get_ledger_path,
    get_out_dir,
    resolve_config,
    trace_summary,
    write_json,
    write_resolved_config,
    write_riccati_csv,
    write_search,
    write_seeds,
    write_summary,
    write_sweep_csv,
    write_trace_csv,
    write_voi_table,
)
from lqr import RiccatiError, expected_loss_offset, riccati_backward
from model import ConfigError, ModelError, load_experiment_document, validate_model
from policy import PolicyError, controller_from_config
from simulate import (
    SearchBudgetError,
    SeedMetrics,
    brute_force_threshold_search,
    check_trace,
    monte_carlo,
    rollout,
    sweep_lambda,
)
from store import ExperimentLedger, RunStatus
from voi import VoiTableError, expected_psi, refinement_gap

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(message)s"


class InvariantViolation(Exception):
    """Raised by commands when validation or a run-time check reports violations."""

    def __init__(self, violations):
        super().__init__(f"{len(violations)} invariant violation(s)")
        self.violations = list(violations)


@contextmanager
def exit_codes():
    """Map exceptions to the exit-code contract."""
    try:
        yield
    except (ConfigError, ModelError, VoiTableError, PolicyError, SearchBudgetError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except InvariantViolation as e:
        click.echo(f"Error: {e}", err=True)
        for violation in e.violations:
            click.echo(f"  - {violation}", err=True)
        sys.exit(EXIT_INVARIANT)
    except (RiccatiError, EstimatorError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_INVARIANT)
    except Exception as e:
        click.echo(f"Failed: {e}", err=True)
        sys.exit(EXIT_FAILURE)


def common_options(func):
    """--config, --out, --seeds, --verbose, shared by every experiment command."""

    @click.option("--config", "config_path", required=True, type=click.Path(), help="Experiment JSON document")
    @click.option("--out", "out_dir", default=None, help="Output directory (default: $VOI_OUT_DIR/<command>-<hash>)")
    @click.option("--seeds", default=None, type=int, help="Number of seeds (overrides simulation.n_seeds)")
    @click.option("--verbose", is_flag=True, help="Debug logging and extra trace columns")
    @functools.wraps(func)
    def wrapper(config_path, out_dir, seeds, verbose, **kwargs):
        logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)
        return func(config_path=config_path, out_dir=out_dir, seeds=seeds, verbose=verbose, **kwargs)

    return wrapper


def load_config(config_path, out_dir=None, seeds=None, lambdas=None) -> ExperimentConfig:
    """Read, resolve and validate; violations raise InvariantViolation."""
    document = load_experiment_document(config_path)
    config = resolve_config(document, out_dir=out_dir, seeds=seeds, lambdas=lambdas, source=config_path)
    report = validate_model(config.model, config.costs)
    if not report.ok:
        raise InvariantViolation(report.violations)
    config.model, config.costs = report.model, report.costs
    return config


def prepare_out_dir(config: ExperimentConfig, command: str, explicit: str | None, seeds=(), **seed_extra) -> str:
    """Create the output directory with its resolved-config and seed ledger."""
    out_dir = explicit or os.path.join(config.out_dir, f"{command}-{config.config_hash()[:12]}")
    os.makedirs(out_dir, exist_ok=True)
    write_resolved_config(out_dir, config)
    write_seeds(out_dir, seeds, **seed_extra)
    return out_dir


def open_ledger(root: str) -> ExperimentLedger:
    os.makedirs(root, exist_ok=True)
    ledger = ExperimentLedger(db_path=get_ledger_path(root))
    ledger.create()
    return ledger


@click.group()
@click.version_option(version="1.0.0", prog_name="VoI Control")
def cli():
    """
    Value-of-information event-triggered estimation and control

    Commands validate experiment documents and produce Riccati, VoI table,
    trace, comparison and sweep artifacts.
    """
    # Load environment variables for all commands
    load_dotenv()


@cli.command()
@common_options
def validate(config_path, out_dir, seeds, verbose):
    """
    Check an experiment document: dimensions, symmetry and definiteness.
    """
    with exit_codes():
        config = load_config(config_path, out_dir, seeds)
        model = config.model
        click.echo(f"Config: {config_path}")
        click.echo(f"  Horizon N: {model.horizon}")
        click.echo(f"  Dimensions: n={model.n} m={model.m} p={model.p}")
        click.echo(f"  lambda: {config.costs.lam:g}")
        click.echo("Valid.")


@cli.command()
@common_options
def riccati(config_path, out_dir, seeds, verbose):
    """
    Solve the backward Riccati pass and write S, L, Gamma, theta per stage.
    """
    with exit_codes():
        config = load_config(config_path, out_dir, seeds)
        ric = riccati_backward(config.model, config.costs)
        out_dir = prepare_out_dir(config, "riccati", out_dir)
        write_riccati_csv(os.path.join(out_dir, "riccati.csv"), ric)
        write_json(
            os.path.join(out_dir, "riccati.json"),
            {
                "horizon": ric.horizon,
                "S0": ric.S[0].tolist(),
                "L0": ric.L[0].tolist(),
                "expected_loss_offset": expected_loss_offset(config.model, config.costs, ric),
            },
        )
        click.echo(f"Riccati solution written to {out_dir}")


@cli.command(name="voi-table")
@common_options
@click.option("--check-refinement", is_flag=True, help="Rebuild with doubled grid and nodes and report the VoI change")
def voi_table(config_path, out_dir, seeds, verbose, check_refinement):
    """
    Build the exact VoI table on the configured mismatch grid.
    """
    with exit_codes():
        config = load_config(config_path, out_dir, seeds)
        ric = riccati_backward(config.model, config.costs)
        start = time.time()
        table = config.table_factory()(config.model, ric)
        out_dir = prepare_out_dir(config, "voi-table", out_dir)
        extra = {}
        if check_refinement:
            extra["refinement_gap"] = refinement_gap(table)
            click.echo(f"Refinement changes VoI by at most {extra['refinement_gap']:.3g}")
        write_voi_table(out_dir, table, extra)
        click.echo(f"VoI table built in {time.time() - start:.1f}s, predicted E[Psi] = {expected_psi(table):.6g}")
        click.echo(f"Written to {out_dir}")


@cli.command()
@common_options
@click.option("--seed", default=None, type=int, help="Seed for the single rollout (default: simulation.seed)")
def simulate(config_path, out_dir, seeds, verbose, seed):
    """
    Run one closed-loop realization and write its trace.
    """
    with exit_codes():
        config = load_config(config_path, out_dir, seeds)
        seed = config.base_seed if seed is None else seed
        ric = riccati_backward(config.model, config.costs)
        scheduler = config.build_scheduler(ric)
        controller = controller_from_config(config.controller, ric)
        out_dir = prepare_out_dir(config, "simulate", out_dir, [seed])

        trace = rollout(
            config.model, config.costs, ric, scheduler, controller, seed, payload_kind=config.payload_kind
        )
        violations = check_trace(trace, config.costs)
        if violations:
            raise InvariantViolation(violations)

        write_trace_csv(os.path.join(out_dir, "trace.csv"), trace, verbose=verbose)
        write_json(os.path.join(out_dir, "summary.json"), trace_summary(trace))

        with open_ledger(config.out_dir) as ledger:
            run = ledger.start_run("simulate", config.config_hash(), out_dir, seed, 1)
            ledger.record_metrics(run, {scheduler.name: [SeedMetrics.from_trace(trace)]})
            ledger.finish_run(run)

        click.echo(f"Stages: {trace.horizon + 1}, transmissions: {trace.transmissions}")
        click.echo(f"R={trace.R_emp:.6g} J={trace.J_emp:.6g} Phi={trace.Phi_emp:.6g}")
        click.echo(f"Trace written to {out_dir}")


@cli.command()
@common_options
def compare(config_path, out_dir, seeds, verbose):
    """
    Monte Carlo comparison of the configured policies under common random numbers.
    """
    with exit_codes():
        config = load_config(config_path, out_dir, seeds)
        if config.n_seeds < 2:
            raise ConfigError("compare needs at least 2 seeds")
        ric = riccati_backward(config.model, config.costs)
        policies = config.build_policies(ric)
        out_dir = prepare_out_dir(config, "compare", out_dir, config.seed_list)

        with open_ledger(config.out_dir) as ledger:
            run = ledger.start_run("compare", config.config_hash(), out_dir, config.base_seed, config.n_seeds)
            try:
                summary = monte_carlo(
                    config.model,
                    config.costs,
                    ric,
                    policies,
                    config.n_seeds,
                    config.base_seed,
                    payload_kind=config.payload_kind,
                )
            except Exception:
                ledger.finish_run(run, RunStatus.FAILED)
                raise
            ledger.record_metrics(run, summary.per_seed)
            ledger.finish_run(run)

        write_summary(
            out_dir, summary, {"expected_loss_offset": expected_loss_offset(config.model, config.costs, ric)}
        )

        for stats in summary.policies:
            click.echo(
                f"{stats.name}: Phi={stats.mean['Phi']:.6g} ± {stats.stderr['Phi']:.2g}"
                f" R={stats.mean['R']:.4g} J={stats.mean['J']:.6g}"
            )
        for diff in summary.paired:
            click.echo(
                f"{diff.first} - {diff.second}: Phi={diff.mean['Phi']:.6g} ± {diff.stderr['Phi']:.2g}"
                f" (t={diff.t_statistic():.2f})"
            )
        click.echo(f"Summary written to {out_dir}")


def _parse_lambdas(ctx, param, value):
    if value is None:
        return None
    try:
        return [float(item) for item in value.split(",") if item.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected a comma-separated list of numbers ({e})") from e


@cli.command()
@common_options
@click.option("--lambdas", default=None, callback=_parse_lambdas, help="Comma-separated lambdas (overrides sweep.lambdas)")
def sweep(config_path, out_dir, seeds, verbose, lambdas):
    """
    Rate-regulation tradeoff: mean R, J, Phi per lambda.
    """
    with exit_codes():
        config = load_config(config_path, out_dir, seeds, lambdas)
        out_dir = prepare_out_dir(config, "sweep", out_dir, config.seed_list)
        rows = sweep_lambda(
            config.model,
            config.costs,
            config.sweep["lambdas"],
            lambda model, ric: config.build_scheduler(ric),
            config.n_seeds,
            config.base_seed,
            controller_factory=lambda ric: controller_from_config(config.controller, ric),
        )
        write_sweep_csv(os.path.join(out_dir, "sweep.csv"), rows)

        with open_ledger(config.out_dir) as ledger:
            run = ledger.start_run("sweep", config.config_hash(), out_dir, config.base_seed, config.n_seeds)
            ledger.finish_run(run)

        for row in rows:
            click.echo(f"lambda={row.lam:g}: R={row.R:.4g} J={row.J:.6g} Phi={row.Phi:.6g}")
        click.echo(f"Sweep written to {out_dir}")


@cli.command()
@common_options
def search(config_path, out_dir, seeds, verbose):
    """
    Exhaustive per-stage threshold search for scalar models with N <= 3.
    """
    with exit_codes():
        config = load_config(config_path, out_dir, seeds)
        thresholds = config.search["thresholds"]
        if not thresholds:
            raise ConfigError("search.thresholds must list at least one threshold")
        ric = riccati_backward(config.model, config.costs)
        table = config.table_factory()(config.model, ric)
        result = brute_force_threshold_search(
            config.model,
            config.costs,
            ric,
            thresholds,
            asymmetric=config.search["asymmetric"],
            table=table,
            method=config.search["method"],
            seeds=config.n_seeds,
            base_seed=config.base_seed,
        )
        if result.method == "monte-carlo":
            # One generator seeded once draws every sample path.
            out_dir = prepare_out_dir(config, "search", out_dir, [config.base_seed], paths=config.n_seeds)
        else:
            out_dir = prepare_out_dir(config, "search", out_dir)
        write_search(out_dir, result)
        click.echo(f"Best thresholds {result.best_thresholds}: Phi={result.best_loss:.6g}")
        click.echo(f"VoI policy: Phi={result.voi_loss:.6g} (gap {result.gap:+.3g} ± {result.gap_stderr:.2g})")
        click.echo(f"Search written to {out_dir}")


@cli.command()
@click.option("--out", "out_dir", default=None, help="Output root holding the ledger (default: $VOI_OUT_DIR)")
@click.option("--limit", default=20, type=int, help="Number of runs to list (default: 20)")
def status(out_dir, limit):
    """
    List recorded runs from the experiment ledger.
    """
    out_dir = out_dir or get_out_dir()
    db_path = get_ledger_path(out_dir)

    click.echo("=== VoI Control Status ===")
    click.echo(f"Output root: {out_dir}")
    click.echo(f"Ledger: {db_path}")

    if not os.path.exists(db_path):
        click.echo("✗ Ledger does not exist")
        return

    try:
        with ExperimentLedger(db_path) as ledger:
            ledger.create()
            runs = ledger.runs(limit=limit)
            counts = ledger.metric_counts()
            click.echo(f"\n=== Recent Runs ({len(runs)}) ===")
            for run in runs:
                click.echo(
                    f"  #{run.id} {run.command} {run.status_enum.name.lower()} {run.created:%Y-%m-%d %H:%M}"
                    f" seeds={run.n_seeds} rows={counts.get(run.id, 0):,} {run.out_dir}"
                )
    except Exception as e:
        click.echo(f"Could not read ledger: {e}")


if __name__ == "__main__":
    cli()
