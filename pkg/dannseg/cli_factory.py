import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from dannseg.commands import register_commands
from dannseg.error import ExitCode

LOG_LEVEL_ENV = "DANNSEG_LOG_LEVEL"


class CommandLineParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with the usage exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ExitCode.USAGE.value, f"{self.prog}: error: {message}\n")


def create_cli():
    load_dotenv()
    level_name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(
        level=level_name if isinstance(getattr(logging, level_name, None), int) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logger = logging.getLogger(__name__)
    if not isinstance(getattr(logging, level_name, None), int):
        logger.warning(f"Unknown {LOG_LEVEL_ENV}={level_name}, using INFO")

    parser = CommandLineParser(
        prog="dannseg",
        description="Domain-adversarial U-Net segmentation on synthetic multi-domain cardiac phantoms.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_commands(subparsers, logger=logger)

    return parser
