import logging

from dannseg.commands.eval_command import register_eval_command
from dannseg.commands.generate_command import register_generate_command
from dannseg.commands.helpers import init_helpers
from dannseg.commands.probe_command import register_probe_command
from dannseg.commands.train_command import register_train_command


def register_commands(subparsers, logger=None):
    command_logger = logger or logging.getLogger(__name__)
    init_helpers(command_logger)

    register_generate_command(subparsers, command_logger)
    register_train_command(subparsers, command_logger)
    register_eval_command(subparsers, command_logger)
    register_probe_command(subparsers, command_logger)
