import argparse
import logging
import pathlib
import sys
from typing import Optional, Sequence

# Ensure src/ (this folder) is on sys.path so "controllers", "models", "services", "views" resolve.
SRC_DIR = pathlib.Path(__file__).resolve().parent
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from controllers.pipeline_controller import PipelineController
from errors import ConfigError, EasyDistillError
from models.config import parse_config
from views.cli_view import CLIView

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

logger = logging.getLogger("easydistill")


class _ArgumentParser(argparse.ArgumentParser):
    # usage problems are config errors (exit 1), not argparse's default 2
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="easydistill", description="Config-driven knowledge distillation pipeline.")
    parser.add_argument("--config", required=True, help="path to the JSON job configuration")
    parser.add_argument("--dry-run", action="store_true", help="validate the config and print the stage plan")
    parser.add_argument("--output-dir", help="override training.output_dir")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None, http_client=None) -> int:
    view = CLIView()
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        view.display_error(str(e))
        return EXIT_CONFIG
    configure_logging(args.verbose, args.quiet)

    try:
        config = parse_config(args.config)
        if args.output_dir:
            config.training.output_dir = str(pathlib.Path(args.output_dir).resolve())
        controller = PipelineController(config, view=view, http_client=http_client)
        if args.dry_run:
            view.display_config(config.dumps(redact=True))
            view.display_plan(config.job_type, controller.describe())
            view.display_message("dry run: no stage was executed")
            return EXIT_OK
        result = controller.dispatch()
    except ConfigError as e:
        view.display_error(str(e))
        return EXIT_CONFIG
    except (EasyDistillError, OSError) as e:
        logger.debug("run failed", exc_info=True)
        view.display_error(str(e))
        return EXIT_RUNTIME

    view.display_run_summary(result)
    view.display_success(f"{config.job_type} finished: {len(result.stages)} stage(s)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
