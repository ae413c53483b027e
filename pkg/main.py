"""
Adversarial SDF Toolkit

Command-line entry point. Subcommands generate synthetic panels, train the
adversarial SDF estimator, evaluate checkpoints and attribute SDF weights to
features. Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numerical failure.
"""
import sys
from typing import Optional, Sequence

import click
import torch
from loguru import logger

from app.cli.attrib import attrib_command
from app.cli.evaluate import eval_command
from app.cli.synth import synth_command
from app.cli.train import train_command
from app.core.errors import SdfToolkitError
from app.utils.logging_config import setup_logging
from config.settings import settings


class SdfGroup(click.Group):
    """Command group mapping toolkit errors to exit codes."""

    def main(  # type: ignore[override]  # pylint: disable=arguments-differ
        self,
        args: Optional[Sequence[str]] = None,
        prog_name: Optional[str] = None,
        complete_var: Optional[str] = None,
        standalone_mode: bool = True,
        **extra,
    ) -> int:
        try:
            result = super().main(
                args, prog_name, complete_var, standalone_mode=False, **extra
            )
            code = result if isinstance(result, int) else 0
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            code = 1
        except click.ClickException as e:
            e.show()
            code = 1
        except SdfToolkitError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            code = e.exit_code
        if standalone_mode:
            sys.exit(code)
        return code


@click.group(cls=SdfGroup)
@click.option("--log-level", default=None, help="Override the configured log level.")
@click.version_option(settings.app_version, prog_name=settings.app_name)
def cli(log_level: Optional[str]) -> None:
    """Adversarial stochastic discount factor estimation."""
    setup_logging(log_level)
    torch.set_num_threads(settings.torch_threads)
    if settings.deterministic_algorithms:
        torch.use_deterministic_algorithms(True)
    logger.debug(f"Starting {settings.app_name} {settings.app_version}")


cli.add_command(synth_command)
cli.add_command(train_command)
cli.add_command(eval_command)
cli.add_command(attrib_command)


if __name__ == "__main__":
    cli()  # pylint: disable=no-value-for-parameter
