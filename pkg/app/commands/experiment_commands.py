import json
import os

import click
from flask import Blueprint, current_app

from app.commands import CommandError, config_options, guarded, open_run_dir, section, snapshot

experiment_bp = Blueprint("experiment", __name__, cli_group=None)

DEFAULT_SWEEP = (0.01, 0.05, 0.2, 0.5, 0.9)


def _task_and_config(nu=None):
    from app.models.apanet import TrainConfig
    from app.models.experiments import build_task

    train = section("train")
    task_section = section("task")
    if nu is not None:
        train["nu"] = nu
    task = build_task(section("scene"), task_section, nu=train["nu"])
    return task, TrainConfig.from_section(train, seed=task.seed)


def _seeds(task, count):
    from app.models.experiments import seed_values

    count = count or section("task")["seeds"]
    if count < 1:
        raise CommandError(f"--seeds must be >= 1, got {count}")
    return seed_values(task.seed, count)


def _emit(reports, run_dir):
    from app.models.repositories import emit_report, write_tables

    provenance = emit_report(reports, run_dir, snapshot())
    tables = write_tables(reports, run_dir)
    click.echo(tables["markdown"], nl=False)
    click.echo(run_dir)
    return provenance


# Single run
@experiment_bp.cli.command("train")
@config_options
@click.option("--method", type=click.Choice(["no_adaptation", "joint", "ss", "apanet", "apanets"]),
              default="apanet", show_default=True)
@click.option("--nu", type=float, default=None, help="labeled target fraction (overrides train.nu)")
@click.option("--checkpoint/--no-checkpoint", default=True, show_default=True, help="save the trained model")
@guarded
def train(method, nu, checkpoint):
    from app.models.apanet import save_model
    from app.models.experiments import run_method

    task, cfg = _task_and_config(nu)
    run_dir = open_run_dir("train")
    report = run_method(task, method, cfg, keep_model=checkpoint)
    if checkpoint and report.model is not None:
        save_model(report.model, os.path.join(run_dir, "model.apanet"))
    _emit([report], run_dir)


# Every method on one task
@experiment_bp.cli.command("adapt")
@config_options
@click.option("--seeds", "seed_count", type=int, default=None, help="number of seeds (default task.seeds)")
@click.option("--jobs", type=int, default=1, show_default=True, help="parallel runs")
@click.option("--method", "methods", multiple=True,
              type=click.Choice(["no_adaptation", "joint", "ss", "apanet", "apanets"]),
              help="restrict to these methods (repeatable)")
@click.option("--adaptability", is_flag=True, help="also run the joint-model adaptability probe")
@guarded
def adapt(seed_count, jobs, methods, adaptability):
    from app.models.experiments import METHODS, adaptability_probe, compare_methods
    from app.models.repositories import write_summary
    app = current_app

    task, cfg = _task_and_config()
    seeds = _seeds(task, seed_count)
    methods = tuple(methods) or METHODS
    if task.nu <= 0 and "ss" in methods:
        methods = tuple(m for m in methods if m != "ss")
        app.logger.warning("train.nu is 0: skipping 'ss', which needs labeled target images")
    run_dir = open_run_dir("adapt")
    reports = compare_methods(task, cfg, seeds, methods, jobs=max(1, jobs))
    _emit(reports, run_dir)
    if adaptability:
        result = adaptability_probe(task, cfg, section("probe"))
        write_summary({
            "task_id": task.task_id,
            "adaptable": str(result.adaptable).lower(),
            "source_position_m": repr(result.source.position_error),
            "source_orientation_deg": repr(result.source.orientation_error),
            "target_position_m": repr(result.target.position_error),
            "target_orientation_deg": repr(result.target.orientation_error),
            "source_threshold": json.dumps([result.source_threshold.position_error,
                                            result.source_threshold.orientation_error]),
            "target_threshold": json.dumps([result.target_threshold.position_error,
                                            result.target_threshold.orientation_error]),
        }, os.path.join(run_dir, "adaptability"))
        click.echo(f"adaptable={str(result.adaptable).lower()}")


@experiment_bp.cli.command("sweep")
@config_options
@click.option("--nu", "nus", type=float, multiple=True, help=f"labeled fractions (default {DEFAULT_SWEEP})")
@click.option("--method", "methods", multiple=True, type=click.Choice(["ss", "apanet", "apanets"]),
              help="methods to sweep (default all three)")
@click.option("--seeds", "seed_count", type=int, default=None, help="number of seeds (default task.seeds)")
@click.option("--jobs", type=int, default=1, show_default=True)
@guarded
def sweep(nus, methods, seed_count, jobs):
    """Labeled-fraction sweep of the semi-supervised methods."""
    from app.models.experiments import SWEEP_METHODS, nu_sweep

    task, cfg = _task_and_config()
    seeds = _seeds(task, seed_count)
    run_dir = open_run_dir("sweep")
    reports = nu_sweep(task, nus or DEFAULT_SWEEP, cfg, seeds, tuple(methods) or SWEEP_METHODS, jobs=max(1, jobs))
    _emit(reports, run_dir)


@experiment_bp.cli.command("report")
@click.argument("archive", type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["markdown", "csv"]), default="markdown", show_default=True)
@guarded
def report(archive, fmt):
    """Render a stored run archive as method-by-task tables."""
    from app.models.repositories import load_archive, write_tables

    reports = load_archive(archive)
    if not reports:
        raise CommandError(f"run archive {archive} holds no runs")
    tables = write_tables(reports, archive)
    click.echo(tables[fmt], nl=False)
