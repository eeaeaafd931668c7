import os

import click
from flask import Blueprint, current_app

from app.commands import CommandError, config_options, guarded, open_run_dir, section

scene_bp = Blueprint("scene", __name__, cli_group=None)


@scene_bp.cli.command("synth")
@config_options
@guarded
def synth():
    """Generate the task's source and target scenes and save them."""
    from app.models.experiments import build_task
    from app.utils.scene_synth import save_scene
    app = current_app

    task = build_task(section("scene"), section("task"))
    run_dir = open_run_dir("synth")
    for scene in task.sources + [task.target]:
        path = os.path.join(run_dir, f"scene{scene.scene_id}.txt")
        save_scene(scene, path)
        app.logger.info(f"Saved scene {scene.scene_id}: {len(scene.train)} train / {len(scene.test)} test -> {path}")
    click.echo(run_dir)


# Finite-difference check of every loss path
@scene_bp.cli.command("gradcheck")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--points", type=int, default=20, show_default=True, help="random points per loss path")
@click.option("--tolerance", type=float, default=1e-5, show_default=True, help="max relative error")
@guarded
def gradcheck(seed, points, tolerance):
    from app.models.apanet import gradcheck_suite

    results = gradcheck_suite(seed=seed, points=points)
    failed = []
    for name, error in results.items():
        status = "ok" if error < tolerance else "FAIL"
        click.echo(f"{name}={error:.3e} {status}")
        if error >= tolerance:
            failed.append(name)
    if failed:
        raise CommandError(f"gradient check failed for {', '.join(failed)} (tolerance {tolerance:g})")
