# Command blueprints: one module per area, registered in create_app.
import functools
import os
from typing import Callable

import click
from flask import current_app

import config as config_module
from app.models.repositories import run_directory


class CommandError(click.ClickException):
    """Single-line ``ERROR: <message>`` on stderr, exit code 1."""

    def format_message(self) -> str:
        return " ".join(self.message.split())

    def show(self, file=None) -> None:
        click.echo(f"ERROR: {self.format_message()}", file=file, err=True)


def config_options(fn: Callable) -> Callable:
    """``--config``, ``--set``, ``--out-dir`` and ``--print-config`` for a command."""
    @click.option("--config", "config_path", type=click.Path(), default=None,
                  help="key=value file of section.key settings")
    @click.option("--set", "assignments", multiple=True, metavar="SECTION.KEY=VALUE",
                  help="override one setting (repeatable, wins over --config)")
    @click.option("--out-dir", type=click.Path(), default=None, help="root of the run directories")
    @click.option("--print-config", is_flag=True, help="print the resolved settings and exit")
    @functools.wraps(fn)
    def wrapper(config_path, assignments, out_dir, print_config, **kwargs):
        app = current_app
        try:
            if config_path:
                config_module.load_config_file(app.config, config_path)
            config_module.apply_overrides(app.config, assignments)
        except ValueError as e:
            raise CommandError(str(e)) from e
        if out_dir:
            app.config["OUT_DIR"] = out_dir
        if print_config:
            click.echo(config_module.snapshot_text(app.config), nl=False)
            return None
        return fn(**kwargs)
    return wrapper


def snapshot() -> str:
    return config_module.snapshot_text(current_app.config)


def section(name: str) -> dict:
    return config_module.section(current_app.config, name)


def open_run_dir(label: str) -> str:
    """Fresh run directory under OUT_DIR holding the resolved config snapshot."""
    text = snapshot()
    try:
        path = run_directory(current_app.config["OUT_DIR"], text, label)
    except OSError as e:
        raise CommandError(f"cannot create run directory under {current_app.config['OUT_DIR']}: {e}") from e
    with open(os.path.join(path, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    current_app.logger.info(f"Run directory: {path}")
    return path


def guarded(fn: Callable) -> Callable:
    """Turn library errors into CommandError."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValueError, RuntimeError, FloatingPointError, OSError, KeyError) as e:
            current_app.logger.debug("command failed", exc_info=True)
            raise CommandError(str(e)) from e
    return wrapper

