from typing import Optional
import logging
import sys

import click
from fastapi import HTTPException
from pydantic import ValidationError

from app.configs.app_settings import settings
from app.models.collective_models import CONCRETE_ALGORITHMS, CollectiveAlgorithm
from app.models.run_models import HarnessResult, RunCommand, RunSpec
from app.models.training_models import LossKind, ScheduleKind
from app.services.harness_services import HarnessService
from app.utils.logging_handlers import configure_logging

logger = logging.getLogger(__name__)

ALGORITHM_CHOICE = click.Choice([a.value for a in CollectiveAlgorithm])


def _run(spec_fields: dict) -> None:
    """Build the RunSpec, run it, print or write the CSV; exit 1 when a correctness check failed"""
    try:
        spec = RunSpec(**spec_fields)
    except ValidationError as e:
        raise click.BadParameter(e.errors()[0]["msg"])

    try:
        result: HarnessResult = HarnessService(spec).run()
    except HTTPException as e:
        click.echo(f"error: {e.detail}", err=True)
        sys.exit(2)

    if not spec.output:
        click.echo(result.csv, nl=False)
    if not result.passed:
        click.echo("correctness check failed, see the log", err=True)
        sys.exit(1)


def _sweep_options(func):
    options = [
        click.option("-P", "--world-size", "world_sizes", type=int, multiple=True, default=(2, 4, 8), show_default=True, help="Node counts to sweep."),
        click.option("-N", "--dimension", "dimensions", type=int, multiple=True, default=(4096,), show_default=True, help="Vector dimensions to sweep."),
        click.option("-d", "--density", "densities", type=float, multiple=True, default=(0.01,), show_default=True, help="Per-node densities k/N."),
        click.option("--seed", "seeds", type=int, multiple=True, default=(0,), show_default=True),
        click.option("--repetitions", type=int, default=1, show_default=True),
        click.option("--backend", type=click.Choice(["simulated", "socket"]), default=None, help="Defaults to TRANSPORT_BACKEND."),
        click.option("-o", "--output", type=click.Path(dir_okay=False), default=None, help="CSV file; stdout when omitted."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group()
@click.option("--log-level", default=settings.LOG_LEVEL, show_default=True)
def cli(log_level: str) -> None:
    """Sparse collectives harness: micro-benchmarks, density experiments and TopK SGD training."""
    configure_logging(log_level)


@cli.command()
@_sweep_options
@click.option("-a", "--algorithm", "algorithms", type=ALGORITHM_CHOICE, multiple=True, default=tuple(a.value for a in CONCRETE_ALGORITHMS), show_default=True)
@click.option("--alpha", type=float, default=settings.COST_ALPHA, show_default=True, help="Cost per message.")
@click.option("--beta-d", type=float, default=settings.COST_BETA_D, show_default=True, help="Cost per dense word.")
@click.option("--beta-s", type=float, default=settings.COST_BETA_S, show_default=True, help="Cost per index-value pair.")
def bench(world_sizes, dimensions, densities, seeds, repetitions, backend, output, algorithms, alpha, beta_d, beta_s) -> None:
    """Run every algorithm over the grid and report trace cost against the predicted bounds."""
    _run(
        dict(
            command=RunCommand.BENCH,
            world_sizes=list(world_sizes),
            dimensions=list(dimensions),
            densities=list(densities),
            seeds=list(seeds),
            repetitions=repetitions,
            backend=backend,
            output=output,
            algorithms=list(algorithms),
            alpha=alpha,
            beta_d=beta_d,
            beta_s=beta_s,
        )
    )


@cli.command()
@_sweep_options
@click.option("--trials", type=int, default=2000, show_default=True, help="Monte Carlo trials per grid point.")
def density(world_sizes, dimensions, densities, seeds, repetitions, backend, output, trials) -> None:
    """Expected size of the reduced result: closed form, Monte Carlo and measured."""
    _run(
        dict(
            command=RunCommand.DENSITY,
            world_sizes=list(world_sizes),
            dimensions=list(dimensions),
            densities=list(densities),
            seeds=list(seeds),
            repetitions=repetitions,
            backend=backend,
            output=output,
            trials=trials,
        )
    )


@cli.command()
@click.option("--dataset", type=click.Path(dir_okay=False), default=None, help="libsvm file; a synthetic problem when omitted.")
@click.option("--rows", type=int, default=2000, show_default=True)
@click.option("--features", type=int, default=1000, show_default=True)
@click.option("--nnz-per-row", type=int, default=10, show_default=True)
@click.option("--informative", type=int, default=10, show_default=True)
@click.option("-P", "--world-size", type=int, default=settings.WORLD_SIZE, show_default=True)
@click.option("-a", "--algorithm", type=ALGORITHM_CHOICE, default=CollectiveAlgorithm.SSAR_RECURSIVE_DOUBLE.value, show_default=True)
@click.option("--topk", type=int, default=8, show_default=True, help="Entries kept per bucket.")
@click.option("--lossless", is_flag=True, help="Communicate the whole accumulated gradient (no TopK).")
@click.option("--bucket-size", type=int, default=settings.TOPK_BUCKET_SIZE, show_default=True)
@click.option("--quant-bits", type=click.Choice(["2", "4", "8"]), default=None, help="Quantize the dense phase (dsar only).")
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--batch", type=int, default=16, show_default=True)
@click.option("--lr", type=float, default=0.1, show_default=True)
@click.option("--lr-schedule", type=click.Choice([s.value for s in ScheduleKind]), default=ScheduleKind.INVERSE_DECAY.value, show_default=True)
@click.option("--decay-steps", type=float, default=100.0, show_default=True)
@click.option("--loss", type=click.Choice([l.value for l in LossKind]), default=LossKind.LOGISTIC.value, show_default=True)
@click.option("--l2", type=float, default=0.0, show_default=True)
@click.option("--average", is_flag=True, help="Divide the summed update by P.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--backend", type=click.Choice(["simulated", "socket"]), default=None)
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None)
def train(
    dataset: Optional[str],
    rows: int,
    features: int,
    nnz_per_row: int,
    informative: int,
    world_size: int,
    algorithm: str,
    topk: int,
    lossless: bool,
    bucket_size: int,
    quant_bits: Optional[str],
    epochs: int,
    batch: int,
    lr: float,
    lr_schedule: str,
    decay_steps: float,
    loss: str,
    l2: float,
    average: bool,
    seed: int,
    backend: Optional[str],
    output: Optional[str],
) -> None:
    """Error-feedback TopK SGD on a sparse linear classifier; one metrics row per epoch and rank."""
    _run(
        dict(
            command=RunCommand.TRAIN,
            dataset=dataset,
            rows=rows,
            features=features,
            nnz_per_row=nnz_per_row,
            informative=informative,
            world_size=world_size,
            algorithm=algorithm,
            topk=None if lossless else topk,
            bucket_size=bucket_size,
            quant_bits=None if quant_bits is None else int(quant_bits),
            epochs=epochs,
            batch=batch,
            lr={"kind": lr_schedule, "initial": lr, "decay_steps": decay_steps},
            loss=loss,
            l2=l2,
            average=average,
            seed=seed,
            backend=backend,
            output=output,
        )
    )


if __name__ == "__main__":
    cli()
