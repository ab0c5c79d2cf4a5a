import json
import os

import click
from dotenv import load_dotenv

from deskedit.app.commands import all_commands
from deskedit.app.core.config import OUTPUT_ROOT, assert_config
from deskedit.app.core.logger import setup_logger
from deskedit.app.utils.exceptions import DeskEditException, get_error_response

# Loading the environment variables from .env file
load_dotenv()

# Setup logger
logger = setup_logger("cli")

CLI_TITLE = "deskedit"
CLI_VERSION = "0.1.0"


class DeskEditGroup(click.Group):
    """Click group with a global handler for the project's exceptions."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except DeskEditException as exc:
            error_response = get_error_response(exc)
            logger.error(f"{ctx.invoked_subcommand or CLI_TITLE} failed: {error_response['detail']}")
            click.echo(json.dumps(error_response), err=True)
            ctx.exit(error_response["exit_code"])


@click.group(cls=DeskEditGroup, context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(CLI_VERSION, prog_name=CLI_TITLE)
def cli():
    """Desk-scale diffusion image editing: data, training, inversion, editing and verification."""
    assert_config()
    logger.debug(f"Output root: {OUTPUT_ROOT}; environment: {os.getenv('ENVIRONMENT', 'development')}")


# Register all commands
for command in all_commands:
    cli.add_command(command)
