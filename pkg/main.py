import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import click
import torch

from icm.commands import datagen, diffusion_demo, dumps, evaluate, fem_demo, infer, train
from icm.commands.common import RunContext
from icm.errors import IcmError
from config import settings

logger = logging.getLogger("icm")


@click.group(
    help="In-context modeling of hyperelastic stress-strain relationships. "
         "Option precedence: command flags > --config file > ICM_* environment/.env > defaults."
)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Run seed (overrides config and ICM_SEED).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="JSON run configuration for the subcommand.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None, help="Output directory.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker processes and torch threads.")
@click.option("--oracle", is_flag=True, help="Replace the network with the true energy gradient.")
@click.pass_context
def cli(ctx: click.Context, seed, config_path, out, threads, oracle):
    threads = threads or settings.THREADS
    torch.set_num_threads(threads)
    ctx.obj = RunContext(
        seed=seed,
        config_path=config_path,
        out=out or Path(settings.OUTPUT_DIR),
        threads=threads,
        oracle=oracle,
    )


# Register the subcommands
cli.add_command(datagen.command)
cli.add_command(train.command)
cli.add_command(evaluate.command)
cli.add_command(infer.command)
cli.add_command(fem_demo.command)
cli.add_command(diffusion_demo.command)
cli.add_command(dumps.dump_tokens)
cli.add_command(dumps.dump_embeddings)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Runs the command line and maps failures to exit codes: 1 usage error, 2 numerical
    failure, 3 dataset failure over threshold.
    """
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="icm", standalone_mode=False)
    except IcmError as e:
        logger.error("%s exit_code=%d", e.detail, e.exit_code)
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except Exception as e:
        logger.exception("An unexpected error occurred: %s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
