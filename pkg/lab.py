import argparse
import importlib
import logging
import sys

import structlog
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from config import LOG_LEVEL  # noqa: E402

# Configure logging (stderr, so JSON printed on stdout stays clean)
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler()]
)
structlog.configure(
    processors=[
        structlog.stdlib.filter_by_level,
        structlog.stdlib.add_logger_name,
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        structlog.processors.KeyValueRenderer(key_order=["event", "logger"]),
    ],
    logger_factory=structlog.stdlib.LoggerFactory(),
    wrapper_class=structlog.stdlib.BoundLogger,
    cache_logger_on_first_use=True,
)
logger = structlog.get_logger(__name__)


class LabCli:
    """Command-line front end; each subcommand lives in its own extension module."""

    def __init__(self):
        self.parser = argparse.ArgumentParser(
            prog="lab",
            description="Simulate, analyse and estimate scalar jump-diffusions.",
        )
        self.subparsers = self.parser.add_subparsers(dest="command", metavar="command")
        self.subparsers.required = True
        self.commands = {}
        self.initial_extensions = [
            "commands.simulate_command",
            "commands.moments_command",
            "commands.cf_command",
            "commands.density_command",
            "commands.train_command",
            "commands.mh_command",
            "commands.convergence_command",
            "commands.reproduce_command",
        ]

    def add_command(self, command):
        """Register a command object exposing name, help, add_arguments and run."""
        sub = self.subparsers.add_parser(command.name, help=command.help, description=command.help)
        sub.add_argument("--config", help="Run configuration JSON (model, task, seeds, output_dir)")
        sub.add_argument("--out-dir", dest="out_dir", help="Output directory")
        sub.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
        command.add_arguments(sub)
        self.commands[command.name] = command

    def setup_hook(self):
        """Load the command extensions."""
        for extension in self.initial_extensions:
            try:
                module = importlib.import_module(extension)
                module.setup(self)
                logger.debug(f"Loaded extension: {extension}")
            except Exception as e:
                logger.error(f"Failed to load extension {extension}: {e}")

    def run(self, argv=None) -> int:
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            # argparse exits 2 on usage errors; those are validation errors here
            return 0 if e.code in (0, None) else 1

        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)

        command = self.commands[args.command]
        try:
            command.run(args)
        except Exception as error:
            return on_command_error(args.command, error)
        return 0


def on_command_error(name: str, error: Exception) -> int:
    """Global error handler: validation errors exit 1, numerical failures exit 2."""
    if isinstance(error, ValueError):
        logger.error(f"Invalid input for {name}: {error}")
        return 1
    if isinstance(error, ArithmeticError):
        logger.error(f"Numerical failure in {name}: {error}")
        return 2

    logger.error(f"Command error in {name}: {error}", exc_info=True)
    raise error


def main(argv=None) -> int:
    cli = LabCli()
    cli.setup_hook()
    return cli.run(argv)


if __name__ == "__main__":
    sys.exit(main())
