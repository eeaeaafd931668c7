import sys

import click
from dotenv import load_dotenv
from flask.cli import FlaskGroup

from app import create_app


def _create_app():
    return create_app()


cli = FlaskGroup(
    name="poseadapt",
    create_app=_create_app,
    add_default_commands=False,
    load_dotenv=False,
    help="Adversarial pose-adaptation lab: synth, gradcheck, train, adapt, sweep, analyze, report.",
)


def main(argv=None) -> int:
    load_dotenv()
    try:
        cli.main(args=argv, prog_name="poseadapt", standalone_mode=False)
    except click.UsageError as e:
        click.echo(f"ERROR: {' '.join(e.format_message().split())}", err=True)
        return 2
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("ERROR: aborted", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
