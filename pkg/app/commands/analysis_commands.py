import click
from flask import Blueprint, current_app

from app.commands import CommandError, config_options, guarded, open_run_dir, section

analysis_bp = Blueprint("analysis", __name__, cli_group=None)


@analysis_bp.cli.command("analyze")
@config_options
@click.option("--queries", multiple=True, required=True, type=click.Path(), help="query pose file (repeatable)")
@click.option("--refs", multiple=True, required=True, type=click.Path(),
              help="reference pose file (repeatable; concatenated)")
@click.option("--anchor-stride", type=int, default=None, help="overrides analysis.anchor_stride")
@click.option("--rho", type=float, default=None, help="meters per radian (overrides analysis.rho)")
@click.option("--tau", type=float, default=None, help="coverage radius; <= 0 means mean pairwise distance")
@click.option("--lenient", is_flag=True, help="skip malformed pose lines instead of failing")
@guarded
def analyze(queries, refs, anchor_stride, rho, tau, lenient):
    """Coverage of the query poses by the reference poses, as anchor-relative 6D points."""
    from app.models.repositories import write_summary
    from app.utils.pose_analysis import PoseFileError, analyze as run_analysis

    settings = section("analysis")
    try:
        summary = run_analysis(
            queries,
            refs,
            anchor_stride=anchor_stride if anchor_stride is not None else settings["anchor_stride"],
            rho=rho if rho is not None else settings["rho"],
            tau=tau if tau is not None else settings["tau"],
            strict=settings["strict"] and not lenient,
        )
    except PoseFileError as e:
        raise CommandError(str(e)) from e

    run_dir = open_run_dir("analyze")
    write_summary(summary, run_dir)
    for key, value in summary.items():
        click.echo(f"{key}={value}")
    current_app.logger.info(f"Analysis summary written to {run_dir}")
